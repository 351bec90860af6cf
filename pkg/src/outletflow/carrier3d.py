"""Flux carrier on the unit ball with k punctures on its boundary sphere.

The tangent 1-form on the sphere is the stereographic pullback of a sum of
planar angle forms, one per puncture except the projection pole.  It is
extended into the ball as the pullback under the radial retraction x -> x/|x|
(a closed form, its vector representative is b_S(x/|x|) / |x|), multiplied by
a cutoff zeta and the carrier is a = curl(zeta b) = grad(zeta) x b.

zeta is 1 near the sphere and 0 both near the centre and in narrow cones
around the rays through the punctures, where the extended form is singular.
A cross section near puncture i is the cap {|x| < 1, |x - p_i| = r}; its
boundary circle lies where zeta = 1, so by Stokes' theorem its flux is the
loop integral of the sphere form, alpha_i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .carrier import angle_form
from .errors import DegeneratePunctures, FluxImbalance


def smooth_step(x):
    """C-infinity step, 0 for x <= 0 and 1 for x >= 1, with its derivative."""
    x = np.asarray(x, dtype=float)
    xc = np.clip(x, 0.0, 1.0)
    inside = (x > 0) & (x < 1)
    xs = np.where(inside, xc, 0.5)
    f0 = np.exp(-1.0 / xs)
    f1 = np.exp(-1.0 / (1.0 - xs))
    s = np.where(inside, f0 / (f0 + f1), (x >= 1).astype(float))
    # d/dx f0/(f0+f1) = f0 f1 (1/x^2 + 1/(1-x)^2) / (f0+f1)^2
    ds = np.where(inside, f0 * f1 * (1 / xs**2 + 1 / (1 - xs) ** 2) / (f0 + f1) ** 2, 0.0)
    return s, ds


def _basis(pole):
    """Orthonormal e1, e2 with e1 x e2 = pole."""
    pole = np.asarray(pole, dtype=float)
    helper = np.array([1.0, 0.0, 0.0]) if abs(pole[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = helper - (helper @ pole) * pole
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(pole, e1)
    return e1, e2


@dataclass
class SphericalCarrier3D:
    punctures: np.ndarray  # (k, 3) unit vectors
    fluxes: np.ndarray
    pole_index: int
    cone: tuple  # chordal radii (inner, outer) of the cutoff cones
    shell: tuple  # radii (inner, outer) of the radial cutoff

    def __post_init__(self):
        self.pole = self.punctures[self.pole_index]
        self.e1, self.e2 = _basis(self.pole)
        self.forms = []
        for i, p in enumerate(self.punctures):
            if i == self.pole_index:
                continue
            self.forms.append(angle_form(self.project(p[None])[0], self.fluxes[i]))

    @property
    def k(self):
        return len(self.punctures)

    # ---- stereographic projection -------------------------------------------

    def project(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        den = 1.0 - x @ self.pole
        return np.stack([x @ self.e1 / den, x @ self.e2 / den], axis=1)

    def _projection_jacobian(self, x):
        """d Pi / d x, shape (n, 2, 3)."""
        den = 1.0 - x @ self.pole
        J = np.empty((len(x), 2, 3))
        for r, e in enumerate((self.e1, self.e2)):
            J[:, r, :] = e[None, :] / den[:, None] + ((x @ e) / den**2)[:, None] * self.pole[None, :]
        return J

    # ---- forms --------------------------------------------------------------

    def sphere_form(self, x):
        """Tangent vector field representing the closed 1-form on the sphere at unit x.

        The projection from the pole reverses the orientation given by the
        outward normal, hence the minus sign: loops positively oriented
        about the outward normal then integrate to +alpha_i.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        xh = x / np.linalg.norm(x, axis=1, keepdims=True)
        if not self.forms:
            return np.zeros_like(xh)
        q = self.project(xh)
        w = sum(f(q) for f in self.forms)
        J = self._projection_jacobian(xh)
        b = -np.einsum("nr,nrk->nk", w, J)
        return b - np.sum(b * xh, axis=1, keepdims=True) * xh

    def zeta(self, x):
        """Cutoff value and gradient at points x (n, 3)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.linalg.norm(x, axis=1)
        xh = x / r[:, None]
        r0, r1 = self.shell
        zr, dzr = smooth_step((r - r0) / (r1 - r0))
        val = zr.copy()
        grad = (dzr / (r1 - r0))[:, None] * xh
        c0, c1 = self.cone
        for p in self.punctures:
            d = xh - p
            rho = np.linalg.norm(d, axis=1)
            g, dg = smooth_step((rho - c0) / (c1 - c0))
            # gradient of rho(x/|x|): tangential projection of (xh - p)/rho, over r
            safe = np.where(rho > 0, rho, 1.0)
            tang = d - np.sum(d * xh, axis=1, keepdims=True) * xh
            grho = tang / (safe * r)[:, None]
            grad = grad * g[:, None] + val[:, None] * (dg / (c1 - c0))[:, None] * grho
            val = val * g
        return val, grad

    def extended_form(self, x):
        """Vector representative of the radially extended form, b_S(x/|x|) / |x|."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        r = np.linalg.norm(x, axis=1)
        return self.sphere_form(x) / r[:, None]

    def velocity(self, x):
        """a = grad(zeta) x b (zeta b has this curl because b is closed)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z, gz = self.zeta(x)
        out = np.zeros_like(x)
        live = np.any(gz != 0.0, axis=1)
        if np.any(live):
            out[live] = np.cross(gz[live], self.extended_form(x[live]))
        return out

    __call__ = velocity

    # ---- checks -----------------------------------------------------------

    def loop(self, i, radius, tilt=0.0, wobble=0.0):
        """Closed loop on the sphere around puncture i, positively oriented about the outward normal.

        ``radius`` is the angular radius; ``wobble`` deforms the loop within
        its homotopy class and ``tilt`` rotates its starting point.
        """
        p = self.punctures[i]
        e1, e2 = _basis(p)

        def curve(theta):
            ang = radius * (1.0 + wobble * np.sin(3 * theta))
            dang = radius * wobble * 3 * np.cos(3 * theta)
            th = theta + tilt
            c, s = np.cos(th), np.sin(th)
            u = c[:, None] * e1 + s[:, None] * e2
            du = -s[:, None] * e1 + c[:, None] * e2
            pts = np.cos(ang)[:, None] * p + np.sin(ang)[:, None] * u
            vel = (-np.sin(ang) * dang)[:, None] * p + (np.cos(ang) * dang)[:, None] * u \
                + np.sin(ang)[:, None] * du
            return pts, vel

        return curve

    def loop_integral(self, curve, n=4096):
        """Periodic trapezoid integral of the sphere form along curve(theta) -> (pts, vel)."""
        theta = 2 * math.pi * np.arange(n) / n
        pts, vel = curve(theta)
        return float(np.sum(self.sphere_form(pts) * vel) * 2 * math.pi / n)

    def cap_flux(self, i, radius, n_beta=400, n_phi=256, order=8):
        """Flux of a through the cap {|x| < 1, |x - p_i| = radius}, normal towards p_i.

        Composite Gauss-Legendre in the polar angle of the cap and the
        periodic trapezoid rule in its azimuth.
        """
        p = self.punctures[i]
        e1, e2 = _basis(p)
        beta_max = math.acos(min(1.0, radius / 2.0))
        xg, wg = np.polynomial.legendre.leggauss(order)
        edges = np.linspace(0.0, beta_max, n_beta // order + 1)
        lo, hi = edges[:-1], edges[1:]
        beta = (0.5 * (hi - lo)[:, None] * (xg + 1) + lo[:, None]).ravel()
        wb = (0.5 * (hi - lo)[:, None] * wg).ravel()
        phi = 2 * math.pi * np.arange(n_phi) / n_phi
        B, P = np.meshgrid(beta, phi, indexing="ij")
        u = np.cos(P)[..., None] * e1 + np.sin(P)[..., None] * e2
        v = -np.cos(B)[..., None] * p + np.sin(B)[..., None] * u  # unit, from p_i to the cap
        x = p + radius * v
        a = self.velocity(x.reshape(-1, 3)).reshape(x.shape)
        integrand = np.sum(a * (-v), axis=-1) * radius**2 * np.sin(B)
        return float(np.sum(integrand * wb[:, None]) * 2 * math.pi / n_phi)

    def divergence(self, x, h=1e-5):
        x = np.atleast_2d(x)
        div = np.zeros(len(x))
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            div += (self.velocity(x + e)[:, j] - self.velocity(x - e)[:, j]) / (2 * h)
        return div


def build_spherical_carrier(punctures, fluxes, pole_index=None, cone=(0.08, 0.25),
                            shell=(0.3, 0.6)) -> SphericalCarrier3D:
    """Carrier on the unit ball for punctures on the unit sphere.

    ``cone`` gives the chordal radii between which the cutoff rises from 0 to
    1 around each puncture direction; ``shell`` the radii of the radial
    cutoff.  Caps used for flux checks need a radius above cone[1].
    """
    P = np.asarray(punctures, dtype=float)
    if P.ndim != 2 or P.shape[1] != 3 or len(P) < 2:
        raise DegeneratePunctures("need at least two punctures given as 3-vectors")
    norms = np.linalg.norm(P, axis=1)
    if np.any(norms == 0):
        raise DegeneratePunctures("puncture at the origin")
    P = P / norms[:, None]
    a = np.asarray(fluxes, dtype=float).ravel()
    if len(a) != len(P):
        raise FluxImbalance(f"expected {len(P)} fluxes, got {len(a)}")
    if abs(a.sum()) > 1e-12 * max(1.0, np.abs(a).max()):
        raise FluxImbalance(f"fluxes sum to {a.sum():.3e}, not zero")
    gaps = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=2) + np.eye(len(P)) * 10
    if gaps.min() < 1e-9:
        raise DegeneratePunctures("coincident punctures")
    c0, c1 = map(float, cone)
    if not 0 < c0 < c1:
        raise ValueError("cone radii must satisfy 0 < inner < outer")
    if gaps.min() <= 2 * c1:
        raise DegeneratePunctures(
            f"punctures closer than twice the cutoff cone radius ({gaps.min():.3g} <= {2 * c1:.3g})")
    r0, r1 = map(float, shell)
    if not 0 < r0 < r1 <= 1:
        raise ValueError("shell radii must satisfy 0 < inner < outer <= 1")
    pole = len(P) - 1 if pole_index is None else int(pole_index)
    return SphericalCarrier3D(P, a, pole, (c0, c1), (r0, r1))
