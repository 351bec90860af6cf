"""Independent oracles and consistency checks.

* exact power-law Poiseuille profiles and a shooting solver that reproduces
  them (also for eps > 0, where no closed form exists);
* flux audits through snapped cross sections;
* Korn and Poincare ratios for zero-trace discrete fields;
* the energy identity obtained by testing the discrete equations with u.

|D| is the Frobenius norm throughout.  For a parallel flow (u(y), 0) this
gives |D| = |u'| / sqrt(2), hence the 2^(p/2) in the closed form below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.optimize import brentq

from .errors import SectionNotAligned, UnsupportedExponent
from .fem import TaylorHood
from .solver import FlowState


@dataclass(frozen=True)
class PoiseuilleProfile:
    """u(y) = ((p-1)/p) (2^(p/2) G)^(1/(p-1)) (h^p' - |y|^p') on [-h, h]."""

    p: float
    h: float
    G: float
    flux: float = field(init=False)

    def __post_init__(self):
        if self.p < 2:
            raise UnsupportedExponent(f"p={self.p} < 2 is not supported")
        if self.h <= 0 or self.G <= 0:
            raise ValueError("h and G must be positive")
        pp = self.p / (self.p - 1)
        c = self.amplitude
        object.__setattr__(self, "flux", 2.0 * c * self.h ** (pp + 1) * pp / (pp + 1))

    @property
    def conjugate(self):
        return self.p / (self.p - 1)

    @property
    def amplitude(self):
        p = self.p
        return (p - 1) / p * (2 ** (p / 2) * self.G) ** (1 / (p - 1))

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        pp = self.conjugate
        return self.amplitude * (self.h**pp - np.minimum(np.abs(y), self.h) ** pp)

    def derivative(self, y):
        y = np.asarray(y, dtype=float)
        pp = self.conjugate
        return -self.amplitude * pp * np.sign(y) * np.abs(y) ** (pp - 1)

    def quadrature_flux(self):
        return 2.0 * quad(lambda y: float(self(y)), 0.0, self.h, epsabs=1e-14, epsrel=1e-13)[0]


def poiseuille_exact(p, h, G) -> PoiseuilleProfile:
    return PoiseuilleProfile(float(p), float(h), float(G))


def poiseuille_for_flux(p, h, alpha) -> PoiseuilleProfile:
    """Profile with the given flux (the flux is proportional to G^(1/(p-1)))."""
    unit = poiseuille_exact(p, h, 1.0)
    return poiseuille_exact(p, h, (alpha / unit.flux) ** (p - 1))


def _strain_rate(tau, p, eps):
    """Invert tau = (eps + (|g|/sqrt2)^(p-2)) g / 2 for the shear rate g."""
    if tau == 0.0:
        return 0.0
    f = lambda g: (eps + (abs(g) / math.sqrt(2)) ** (p - 2)) * g / 2 - tau
    hi = 1.0
    while f(math.copysign(hi, tau)) * math.copysign(1.0, tau) < 0:
        hi *= 2.0
    a, b = (0.0, hi) if tau > 0 else (-hi, 0.0)
    return brentq(f, a, b, xtol=1e-16, rtol=1e-15, maxiter=200)


def poiseuille_shooting(p, h, G, eps=0.0, rtol=1e-12):
    """Numerical parallel-flow profile from the 1D momentum balance.

    Integrates u' = g(tau), tau' = -G from the centreline, where g inverts
    the shear stress, and shoots on u(0) so that u(h) = 0.  Returns a
    callable profile on [-h, h] plus its flux.
    """
    def run(u0, dense=False):
        sol = solve_ivp(lambda y, z: [_strain_rate(-G * y, p, eps)], (0.0, h), [u0],
                        rtol=rtol, atol=1e-14, dense_output=dense, method="DOP853")
        return sol

    end = run(0.0).y[0, -1]  # u(h) - u(0); the ODE does not involve u
    u0 = brentq(lambda c: c + end, -2 * abs(end) - 1, 2 * abs(end) + 1, xtol=1e-15)
    sol = run(u0, dense=True)

    def profile(y):
        y = np.abs(np.asarray(y, dtype=float))
        return sol.sol(np.minimum(y, h).ravel())[0].reshape(y.shape)

    flux = 2.0 * quad(lambda y: float(profile(y)), 0.0, h, epsabs=1e-14, epsrel=1e-12)[0]
    return profile, flux


def shooting_for_flux(p, h, alpha, eps=0.0):
    """Shooting profile whose flux is ``alpha`` (secant on log G)."""
    def flux_of(logG):
        return poiseuille_shooting(p, h, math.exp(logG), eps)[1] - alpha

    g0 = math.log(poiseuille_for_flux(p, h, alpha).G)
    logG = brentq(flux_of, g0 - 5.0, g0 + 5.0, xtol=1e-14)
    return poiseuille_shooting(p, h, math.exp(logG), eps)[0]


def profile_error(state: FlowState, profile, x_range, axis=0):
    """Relative L2 error of v against the parallel flow profile(y) e_axis.

    Uses every triangle whose centroid lies in ``x_range`` along ``axis``.
    """
    space = state.space
    cen = space.mesh.vertices[space.mesh.triangles].mean(axis=1)[:, axis]
    mask = (cen >= x_range[0]) & (cen <= x_range[1])
    V = space.values(state.ux, state.uy, mask)
    q = space.q_points[mask]
    transverse = q[..., 1 - axis]
    ex = np.zeros_like(V)
    ex[..., axis] = profile(transverse)
    err = space.integrate(np.sum((V - ex) ** 2, axis=-1), mask)
    ref = space.integrate(np.sum(ex**2, axis=-1), mask)
    return math.sqrt(err / ref)


# -- flux audit ---------------------------------------------------------------


@dataclass
class FluxAudit:
    fluxes: list  # (outlet, t, flux)
    deviation: float  # max pairwise spread within one outlet
    max_error: float  # max |flux - alpha_i| when expected fluxes are known

    def as_rows(self):
        return [{"outlet": i, "t": t, "flux": f} for i, t, f in self.fluxes]


def flux_audit(subject, sections, expected=None) -> FluxAudit:
    """Fluxes of a FlowState (or a carrier) through cross sections.

    For a FlowState the sections must consist of mesh edges (SectionNotAligned
    otherwise); a carrier is integrated with its own Gauss rule.
    """
    rows = []
    for sec in sections:
        if isinstance(subject, FlowState):
            f = subject.space.section_flux(subject.ux, subject.uy, sec)
        elif hasattr(subject, "section_flux"):
            f = subject.section_flux(sec.outlet, sec.t)
        else:
            raise TypeError("flux_audit needs a FlowState or a carrier")
        rows.append((sec.outlet, sec.t, f))
    dev = 0.0
    for i in {r[0] for r in rows}:
        vals = [r[2] for r in rows if r[0] == i]
        dev = max(dev, max(vals) - min(vals))
    err = 0.0
    if expected is not None:
        err = max((abs(f - expected[i]) for i, _, f in rows), default=0.0)
    return FluxAudit(rows, dev, err)


# -- Korn / Poincare ------------------------------------------------------------


@dataclass
class KornPoincareReport:
    korn_max: float  # max ||grad v||^2 / (2 ||D v||^2)
    poincare_max: float  # max ||v||_p / ||grad v||_p
    samples: int


def _norms(space, ux, uy, p):
    G = space.gradients(ux, uy)
    D = 0.5 * (G + np.swapaxes(G, -1, -2))
    g2 = space.integrate(np.sum(G * G, axis=(-2, -1)))
    d2 = space.integrate(np.sum(D * D, axis=(-2, -1)))
    V = space.values(ux, uy)
    vp = space.integrate(np.sum(V * V, axis=-1) ** (p / 2)) ** (1 / p)
    gp = space.integrate(np.sum(G * G, axis=(-2, -1)) ** (p / 2)) ** (1 / p)
    return g2, d2, vp, gp


def random_smooth_fields(space, count, rng, modes=4):
    """Zero-trace fields solving -Lap v = f for random low-frequency forcing f."""
    import scipy.sparse.linalg as spla

    nodes = space.nodes
    lo, hi = nodes.min(axis=0), nodes.max(axis=0)
    span = np.maximum(hi - lo, 1e-12)
    A = space.vector_laplacian()
    M = space.velocity_mass()
    n2 = space.n_p2
    interior = np.setdiff1d(np.arange(2 * n2), np.concatenate([space.boundary_nodes,
                                                               space.boundary_nodes + n2]))
    lu = spla.splu(A[interior][:, interior].tocsc())
    out = []
    for _ in range(count):
        f = np.zeros(2 * n2)
        for comp in range(2):
            for _ in range(modes):
                k = rng.integers(1, 4, size=2) * math.pi / span
                ph = rng.uniform(0, 2 * math.pi)
                f[comp * n2:(comp + 1) * n2] += rng.normal() * np.sin(
                    k[0] * (nodes[:, 0] - lo[0]) + k[1] * (nodes[:, 1] - lo[1]) + ph)
        rhs = (M @ f)[interior]
        v = np.zeros(2 * n2)
        v[interior] = lu.solve(rhs)
        out.append((v[:n2], v[n2:]))
    return out


def korn_poincare_check(mesh, samples=1000, seed=0, p=2.0, smooth_samples=8) -> KornPoincareReport:
    """Empirical Korn and Poincare ratios over random zero-trace P2 fields.

    The Korn ratio is sampled over ``samples`` fields with independent random
    interior nodal values.  The Poincare ratio uses ``smooth_samples`` fields
    driven by fixed random low-frequency forcing, so that it is comparable
    across mesh refinements.
    """
    rng = np.random.default_rng(seed)
    space = mesh if isinstance(mesh, TaylorHood) else TaylorHood(mesh)
    n2 = space.n_p2
    interior = np.ones(n2, dtype=bool)
    interior[space.boundary_nodes] = False
    # batched Korn ratios: gradients are linear in the nodal values
    c = space.cells
    d = space.dphi
    korn = 0.0
    batch = 50
    done = 0
    while done < samples:
        m = min(batch, samples - done)
        U = rng.normal(size=(m, 2, n2)) * interior
        gx = np.einsum("mti,tqix->mtqx", U[:, 0][:, c], d)
        gy = np.einsum("mti,tqix->mtqx", U[:, 1][:, c], d)
        G = np.stack([gx, gy], axis=3)
        D = 0.5 * (G + np.swapaxes(G, -1, -2))
        g2 = np.einsum("tq,mtqij->m", space.wdet, G * G)
        d2 = np.einsum("tq,mtqij->m", space.wdet, D * D)
        keep = g2 > 0
        if np.any(keep):
            korn = max(korn, float(np.max(g2[keep] / (2 * d2[keep]))))
        done += m
    poinc = 0.0
    smooth_rng = np.random.default_rng(seed + 1)
    for ux, uy in random_smooth_fields(space, smooth_samples, smooth_rng):
        _, _, vp, gp = _norms(space, ux, uy, p)
        if gp > 0:
            poinc = max(poinc, vp / gp)
    return KornPoincareReport(korn, poinc, samples)


# -- energy identity ------------------------------------------------------------


def energy_terms(state: FlowState):
    """Stress work, convective work and carrier work of a state (see energy_residual)."""
    space = state.space
    p, eps = state.config.p, state.epsilon
    vx, vy = state.ux, state.uy
    ux, uy = state.u
    Gv = space.gradients(vx, vy)
    Dv = 0.5 * (Gv + np.swapaxes(Gv, -1, -2))
    Gu = space.gradients(ux, uy)
    Du = 0.5 * (Gu + np.swapaxes(Gu, -1, -2))
    nrm = np.sqrt(np.sum(Dv * Dv, axis=(-2, -1)))
    nu = eps + (nrm ** (p - 2) if p != 2 else 1.0)
    stress_work = space.integrate(nu * np.sum(Dv * Du, axis=(-2, -1)))
    conv = 0.0
    if state.config.include_convection:
        V = space.values(vx, vy)
        U = space.values(ux, uy)
        vgv = np.einsum("tqx,tqcx->tqc", V, Gv)
        vgu = np.einsum("tqx,tqcx->tqc", V, Gu)
        conv = space.integrate(0.5 * np.sum(vgv * U, axis=-1) - 0.5 * np.sum(vgu * V, axis=-1))
    B = space.divergence_matrix()
    ax, ay = state.lift_x, state.lift_y
    # integral P div a_h = -(B a_h) . P
    carrier_work = -float(state.pressure @ (B @ np.concatenate([ax, ay])))
    return stress_work, conv, carrier_work


def energy_residual(state: FlowState, carrier=None) -> float:
    """Relative defect of the discrete energy identity.

    Testing the discrete momentum equation with u = v - a_h and the
    continuity equation with P gives
        int S(D v):D u + c(v; v, u) + int P div a_h = 0.
    The defect is divided by int |S(D v)| |D u| + |c(v; v, u)| + |int P div a_h|,
    the scale of the individual terms (the signed stress work alone can
    nearly cancel against the convective work).
    """
    sw, cw, aw = energy_terms(state)
    scale = _stress_scale(state) + abs(cw) + abs(aw)
    if scale == 0.0:
        return 0.0
    return abs(sw + cw + aw) / scale


def _stress_scale(state):
    space = state.space
    p, eps = state.config.p, state.epsilon
    Gv = space.gradients(state.ux, state.uy)
    Dv = 0.5 * (Gv + np.swapaxes(Gv, -1, -2))
    ux, uy = state.u
    Gu = space.gradients(ux, uy)
    Du = 0.5 * (Gu + np.swapaxes(Gu, -1, -2))
    nv = np.sqrt(np.sum(Dv * Dv, axis=(-2, -1)))
    nu_ = np.sqrt(np.sum(Du * Du, axis=(-2, -1)))
    visc = eps + (nv ** (p - 2) if p != 2 else 1.0)
    return space.integrate(visc * nv * nu_)
