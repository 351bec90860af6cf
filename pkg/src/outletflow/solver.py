"""Regularized power-law Navier-Stokes on a truncated domain.

Finds v = u + a_h (a_h the P2 interpolant of the flux carrier) and P with

    integral (eps + |D(v)|^(p-2)) D(v) : D(phi) + c(v; v, phi) - P div(phi) = 0
    integral q div(v) = 0

for every P2 test field phi vanishing on the boundary and every P1 q, where
c is the skew-symmetric convection form and |D| the Frobenius norm.  The
pressure is gauged to zero mean through a scalar Lagrange multiplier.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import pymetis

from .errors import LinearSolveFailure, NonlinearDivergence, NumericalBlowup, UnsupportedExponent
from .fem import TaylorHood

log = logging.getLogger(__name__)

_DEGENERATE = 1e-14


@dataclass(frozen=True)
class SolverConfig:
    p: float = 2.0
    epsilon: float | None = None  # None -> 1/t
    picard_tol: float = 1e-2
    newton_tol: float = 1e-9
    max_iters: int = 60
    armijo: float = 1e-4
    min_step: float = 2.0**-12
    include_convection: bool = True

    def __post_init__(self):
        if self.p < 2:
            raise UnsupportedExponent(f"p={self.p} < 2 is not supported")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        for name in ("picard_tol", "newton_tol"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")

    def eps_for(self, t):
        return 1.0 / t if self.epsilon is None else self.epsilon


@dataclass
class FlowState:
    space: TaylorHood = field(repr=False)
    ux: np.ndarray = field(repr=False)
    uy: np.ndarray = field(repr=False)
    pressure: np.ndarray = field(repr=False)
    lift_x: np.ndarray = field(repr=False)
    lift_y: np.ndarray = field(repr=False)
    config: SolverConfig
    epsilon: float
    multiplier: float = 0.0
    history: list = field(default_factory=list, repr=False)
    carrier: object = field(default=None, repr=False)
    residual: float = 0.0
    seconds: float = 0.0

    @property
    def mesh(self):
        return self.space.mesh

    @property
    def t(self):
        return self.space.mesh.t

    @property
    def u(self):
        """Flux-free part u = v - a_h (zero on the whole boundary)."""
        return self.ux - self.lift_x, self.uy - self.lift_y

    def vertex_velocity(self):
        n = self.space.n_p1
        return np.column_stack([self.ux[:n], self.uy[:n]])


# -- constitutive law ---------------------------------------------------------


def stress(D, p, epsilon):
    """(epsilon + |D|^(p-2)) D for symmetric tensors D (..., 2, 2)."""
    if p < 2:
        raise UnsupportedExponent(f"p={p} < 2 is not supported")
    D = np.asarray(D, dtype=float)
    return _viscosity(D, p, epsilon)[..., None, None] * D


def _viscosity(D, p, epsilon):
    if p == 2:
        return np.full(D.shape[:-2], epsilon + 1.0)
    nrm = np.sqrt(np.sum(D * D, axis=(-2, -1)))
    return epsilon + nrm ** (p - 2)


def monotonicity_gap(x, y, p):
    """Return (<|x|^(p-2) x - |y|^(p-2) y, x - y>, |x - y|^p) for tensors or vectors.

    The last axes after the first are flattened, so arrays of 2x2 tensors
    (n, 2, 2) and of vectors (n, m) are both accepted.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    lead = x.shape[:1] if x.ndim > 1 else ()
    xf = x.reshape(lead + (-1,))
    yf = y.reshape(lead + (-1,))
    nx = np.linalg.norm(xf, axis=-1, keepdims=True)
    ny = np.linalg.norm(yf, axis=-1, keepdims=True)
    sx = nx ** (p - 2) * xf if p != 2 else xf
    sy = ny ** (p - 2) * yf if p != 2 else yf
    d = xf - yf
    gap = np.sum((sx - sy) * d, axis=-1)
    comp = np.linalg.norm(d, axis=-1) ** p
    return gap, comp


# -- assembly -----------------------------------------------------------------


class _System:
    """Cached sparsity and constant blocks for one mesh."""

    def __init__(self, space: TaylorHood):
        self.space = space
        n2 = space.n_p2
        cells = space.cells
        self.vdofs = np.hstack([cells, cells + n2])  # (nt, 12), order (comp, node)
        self.rows = np.repeat(self.vdofs, 12, axis=1).ravel()
        self.cols = np.tile(self.vdofs, (1, 12)).ravel()
        self.B = space.divergence_matrix()
        self.m = space.p1_mean_vector()
        nb = space.boundary_nodes
        fixed = np.zeros(space.n_dofs + 1, dtype=bool)
        fixed[nb] = True
        fixed[nb + n2] = True
        self.free = np.flatnonzero(~fixed)
        self.fixed = np.flatnonzero(fixed)
        self._order = None

    def ordering(self):
        """Fill-reducing permutation of the free unknowns.

        Nested dissection of the P2 node graph; the unknowns of one node
        (ux, uy, then p at vertices) stay adjacent, so pressure pivots follow
        their velocity neighbours and factorization without pivoting is safe
        in practice (checked by the caller).
        """
        if self._order is not None:
            return self._order
        space = self.space
        n2 = space.n_p2
        c = space.cells
        rows = np.repeat(c, 6, axis=1).ravel()
        cols = np.tile(c, (1, 6)).ravel()
        G = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n2, n2))
        G.setdiag(0)
        G.eliminate_zeros()
        adj = pymetis.CSRAdjacency(G.indptr.astype(np.int64), G.indices.astype(np.int64))
        perm, _ = pymetis.nested_dissection(adj)
        perm = np.asarray(perm)
        nv = space.n_velocity
        seq = [perm, perm + n2]
        pnodes = np.where(perm < space.n_p1, perm + nv, -1)
        seq.append(pnodes)
        dofs = np.stack(seq, axis=1).ravel()
        dofs = dofs[dofs >= 0]
        dofs = np.append(dofs, space.n_dofs)  # mean multiplier last
        position = np.full(space.n_dofs + 1, -1)
        position[self.free] = np.arange(len(self.free))
        order = position[dofs]
        self._order = order[order >= 0]
        return self._order

    def factorize(self, M):
        """Factor a matrix restricted to the free unknowns; returns a solve function."""
        order = self.ordering()
        Mp = M[order][:, order].tocsc()
        lu = None
        try:
            lu = spla.splu(Mp, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                           options=dict(SymmetricMode=True))
        except RuntimeError:
            pass
        fallback = []

        def solve(rhs):
            if lu is not None and not fallback:
                x = np.empty_like(rhs)
                x[order] = lu.solve(rhs[order])
                scale = max(np.linalg.norm(rhs), 1e-300)
                if np.all(np.isfinite(x)) and np.linalg.norm(M @ x - rhs) <= 1e-8 * scale:
                    return x
                log.info("pivot-free factorization inaccurate, retrying with partial pivoting")
            if not fallback:
                fallback.append(_factorize_pivoting(M.tocsc()))
            return fallback[0](rhs)

        return solve

    def solve(self, M, rhs):
        """Solve M x = rhs for a matrix restricted to the free unknowns."""
        return self.factorize(M)(rhs)

    def block(self, A):
        B = self.B
        m = sp.csr_matrix(self.m[:, None])
        return sp.bmat([[A, B.T, None], [B, None, m], [None, m.T, None]], format="csc")


def _local_terms(space, vx, vy, p, eps, convection, want_jac, picard=False):
    G = space.gradients(vx, vy)  # (nt, nq, 2, 2)
    if not np.all(np.isfinite(G)):
        raise NumericalBlowup("non-finite velocity gradient")
    D = 0.5 * (G + np.swapaxes(G, -1, -2))
    nrm2 = np.sum(D * D, axis=(-2, -1))
    if p == 2:
        nu = np.full(nrm2.shape, eps + 1.0)
        beta = np.zeros_like(nrm2)
    else:
        with np.errstate(over="raise", invalid="raise"):
            try:
                nrm = np.sqrt(nrm2)
                nu = eps + nrm ** (p - 2)
                beta = np.where(nrm > _DEGENERATE, (p - 2) * np.where(nrm > _DEGENERATE, nrm, 1.0) ** (p - 4), 0.0)
            except FloatingPointError as exc:
                raise NumericalBlowup("stress overflow") from exc
    if not np.all(np.isfinite(nu)):
        raise NumericalBlowup("stress overflow")
    S = nu[..., None, None] * D
    dphi = space.dphi  # (nt, nq, 6, 2)
    w = space.wdet
    # residual: sum_q w (S grad phi_i)_c
    Ru = np.einsum("tq,tqcx,tqix->tci", w, S, dphi)
    if convection:
        V = space.values(vx, vy)  # (nt, nq, 2)
        vgv = np.einsum("tqx,tqcx->tqc", V, G)
        vgphi = np.einsum("tqx,tqix->tqi", V, dphi)
        Ru += 0.5 * np.einsum("tq,tqc,qi->tci", w, vgv, space.phi)
        Ru -= 0.5 * np.einsum("tq,tqi,tqc->tci", w, vgphi, V)
    Ru = Ru.reshape(len(w), 12)
    if not want_jac:
        return Ru, None
    nt = len(w)
    gg = np.einsum("tqix,tqjx->tqij", dphi, dphi)
    wnu = w * nu
    K = np.zeros((nt, 2, 6, 2, 6))
    iso = 0.5 * np.einsum("tq,tqij->tij", wnu, gg)
    for c in range(2):
        K[:, c, :, c, :] += iso
    # 0.5 * nu * (g_j)_c (g_i)_d
    K += 0.5 * np.einsum("tq,tqid,tqjc->tcidj", wnu, dphi, dphi)
    if not picard and p != 2:
        Dg = np.einsum("tqcx,tqix->tqci", D, dphi)  # (D grad phi_i)_c
        K += np.einsum("tq,tqci,tqdj->tcidj", w * beta, Dg, Dg)
    if convection:
        V = space.values(vx, vy)
        vgphi = np.einsum("tqx,tqix->tqi", V, dphi)
        phi = space.phi
        skew = 0.5 * (np.einsum("tq,tqj,qi->tij", w, vgphi, phi)
                      - np.einsum("tq,tqi,qj->tij", w, vgphi, phi))
        for c in range(2):
            K[:, c, :, c, :] += skew
        if not picard:
            # 0.5 phi_j (dv_c/dx_d) phi_i - 0.5 phi_j (dphi_i/dx_d) v_c
            K += 0.5 * np.einsum("tq,tqcd,qi,qj->tcidj", w, G, phi, phi)
            K -= 0.5 * np.einsum("tq,tqid,tqc,qj->tcidj", w, dphi, V, phi)
    return Ru, K.reshape(nt, 12, 12)


def assemble(space, vx, vy, P, multiplier, p, epsilon, convection=True, jacobian=True,
             system=None, picard=False):
    """Residual vector and Jacobian of the discrete weak form.

    The unknown vector is [vx, vy, P, multiplier]; rows for boundary velocity
    dofs are included (callers restrict to free dofs).  With ``picard=True``
    the returned matrix is the frozen-viscosity (Oseen) operator instead.
    """
    sys_ = system or _System(space)
    Ru, K = _local_terms(space, vx, vy, p, epsilon, convection, jacobian, picard)
    nv = space.n_velocity
    R = np.zeros(space.n_dofs + 1)
    np.add.at(R, sys_.vdofs.ravel(), Ru.ravel())
    v = np.concatenate([vx, vy])
    R[:nv] += sys_.B.T @ P
    R[nv:nv + space.n_p1] = sys_.B @ v + sys_.m * multiplier
    R[-1] = sys_.m @ P
    if not jacobian:
        return R, None
    A = sp.csr_matrix((K.ravel(), (sys_.rows, sys_.cols)), shape=(nv, nv))
    return R, sys_.block(A)


def energy(space, vx, vy, p, epsilon):
    """integral (eps/2)|D|^2 + (1/p)|D|^p."""
    G = space.gradients(vx, vy)
    D = 0.5 * (G + np.swapaxes(G, -1, -2))
    n2 = np.sum(D * D, axis=(-2, -1))
    return space.integrate(0.5 * epsilon * n2 + n2 ** (0.5 * p) / p)


# -- driver -------------------------------------------------------------------


def _factorize_pivoting(M):
    try:
        lu = spla.splu(M, permc_spec="COLAMD")
    except RuntimeError as exc:
        raise LinearSolveFailure(f"sparse factorization failed: {exc}") from exc

    def solve(rhs):
        x = lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise LinearSolveFailure("non-finite solution of the linear system")
        return x

    return solve


def lift(space, carrier):
    """P2 interpolant of the carrier at every velocity node."""
    if carrier is None:
        z = np.zeros(space.n_p2)
        return z, z.copy()
    return space.interpolate(lambda pts: carrier.velocity(pts))


def solve_truncated(cd, mesh, carrier, config: SolverConfig, initial=None, space=None) -> FlowState:
    """Solve the regularized truncated problem with v = a on the boundary.

    ``initial`` may be an array [vx, vy] of P2 nodal values used as warm
    start; its boundary values are overwritten by the carrier lifting.
    """
    t0 = time.perf_counter()
    space = space or TaylorHood(mesh)
    system = _System(space)
    eps = config.eps_for(cd.t if cd is not None else mesh.t)
    p = config.p
    conv = config.include_convection
    ax, ay = lift(space, carrier)
    n2 = space.n_p2
    nv = space.n_velocity
    x = np.zeros(space.n_dofs + 1)
    x[:n2], x[n2:nv] = ax, ay
    if initial is not None:
        x[:nv] = initial
        nb = space.boundary_nodes
        x[nb], x[nb + n2] = ax[nb], ay[nb]
    free = system.free

    def residual(xx, jac=True, picard=False):
        vx, vy = xx[:n2], xx[n2:nv]
        P = xx[nv:nv + space.n_p1]
        return assemble(space, vx, vy, P, xx[-1], p, eps, conv, jac, system, picard)

    r_ref, _ = residual(np.concatenate([ax, ay, np.zeros(space.n_p1 + 1)]), jac=False)
    ref = float(np.linalg.norm(r_ref[free]))
    history = []

    def finish(xx, res):
        state = FlowState(space, xx[:n2].copy(), xx[n2:nv].copy(), xx[nv:nv + space.n_p1].copy(),
                          ax, ay, config, eps, float(xx[-1]), history, carrier, res,
                          time.perf_counter() - t0)
        return state

    if ref == 0.0:
        return finish(x, 0.0)

    R, _ = residual(x, jac=False)
    rel = float(np.linalg.norm(R[free])) / ref
    history.append((0, "init", rel, 0.0))
    phase = "picard" if rel > config.picard_tol else "newton"
    it = 0
    while rel > config.newton_tol:
        it += 1
        if it > config.max_iters:
            raise NonlinearDivergence(
                f"no convergence in {config.max_iters} iterations (residual {rel:.3e})", history)
        if phase == "picard":
            _, A = residual(x, picard=True)
            Aff = A[free][:, free]
            rhs = -(A[free][:, system.fixed] @ x[system.fixed])
            cand = x.copy()
            cand[free] = system.solve(Aff, rhs)
            direction = cand - x
            step, x, rel_new = _line_search(residual, x, direction, rel, ref, free, config,
                                            energy_fn=None if conv else (
                                                lambda xx: energy(space, xx[:n2], xx[n2:nv], p, eps)))
        else:
            R, J = residual(x)
            direction = np.zeros_like(x)
            direction[free] = system.solve(J[free][:, free], -R[free])
            step, x, rel_new = _line_search(residual, x, direction, rel, ref, free, config)
        history.append((it, phase, rel_new, step))
        log.debug("iter %d %s residual %.3e step %.4g", it, phase, rel_new, step)
        if step == 0.0:
            if phase == "newton":
                phase = "picard"
                continue
            raise NonlinearDivergence("line search failed in Picard phase", history)
        rel = rel_new
        if phase == "picard" and rel <= config.picard_tol:
            phase = "newton"
    return finish(x, rel)


def _line_search(residual, x, direction, rel, ref, free, config, energy_fn=None):
    """Backtracking on the residual norm (or on the energy when given)."""
    step = 1.0
    e0 = energy_fn(x) if energy_fn else None
    while step >= config.min_step:
        cand = x + step * direction
        try:
            R, _ = residual(cand, jac=False)
        except NumericalBlowup:
            step *= 0.5
            continue
        rel_new = float(np.linalg.norm(R[free])) / ref
        if energy_fn is not None:
            if energy_fn(cand) <= e0 + 1e-14 * max(1.0, abs(e0)):
                return step, cand, rel_new
        elif rel_new <= (1 - config.armijo * step) * rel:
            return step, cand, rel_new
        step *= 0.5
    return 0.0, x, rel


# -- export -------------------------------------------------------------------


def strain_norm_at_vertices(state: FlowState):
    """|D(v)| averaged from the incident elements onto mesh vertices."""
    space = state.space
    G = space.gradients(state.ux, state.uy)
    D = 0.5 * (G + np.swapaxes(G, -1, -2))
    per_tri = np.sqrt(np.sum(D * D, axis=(-2, -1))).mean(axis=1)
    T = space.mesh.triangles
    acc = np.zeros(space.n_p1)
    cnt = np.zeros(space.n_p1)
    np.add.at(acc, T.ravel(), np.repeat(per_tri, 3))
    np.add.at(cnt, T.ravel(), 1.0)
    return acc / np.maximum(cnt, 1)


def write_solution_vtk(state: FlowState, path):
    from .meshing import write_vtk

    dn = strain_norm_at_vertices(state)
    nu = state.epsilon + (dn ** (state.config.p - 2) if state.config.p != 2 else 1.0)
    write_vtk(state.mesh, path, point_data={
        "velocity": state.vertex_velocity(),
        "pressure": state.pressure,
        "strain_norm": dn,
        "stress_norm": nu * dn,
    })


def write_convergence_csv(state: FlowState, path):
    with open(path, "w") as fh:
        fh.write("iter,phase,residual,step\n")
        for it, phase, res, step in state.history:
            fh.write(f"{it},{phase},{res:.10e},{step:.6g}\n")


def with_config(config: SolverConfig, **kw) -> SolverConfig:
    return replace(config, **kw)
