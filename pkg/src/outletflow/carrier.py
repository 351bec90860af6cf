"""Divergence-free flux carriers in two dimensions.

The carrier is a = (d psi/dy, -d psi/dx) for a stream function psi that is
constant on a collar of every wall arc.  Walking counter-clockwise around the
boundary, the walls split into k arcs separated by the outlets; arc m lies
between the outlets at positions m and m+1 of the counter-clockwise order and
carries the constant

    c_m = alpha_{o_0} + ... + alpha_{o_m}      (c_{k-1} = 0 by flux balance).

Crossing outlet o_m from its right wall (arc m-1) to its left wall (arc m)
raises psi by alpha_{o_m}, which is exactly the flux of a through any cross
section.

Far in a tube psi follows the cross-channel coordinate through a quintic
smoothstep.  In the core, where no such coordinate exists, psi is a
partition of unity built from compactly supported kernels centred on samples
of the wall arcs; the two are blended over the first ``s_blend`` units of each
outlet.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import shapely
from scipy.spatial import cKDTree

from .errors import CutoffTooWide, FluxImbalance, InvalidGeometry, SingularPoint
from .geometry import ChannelDomain, cross_section, rot90

FLUX_TOL = 1e-12


def smoothstep(x):
    """Quintic smoothstep Q and its first two derivatives, clamped to [0, 1]."""
    x = np.asarray(x, dtype=float)
    inside = (x > 0) & (x < 1)
    xc = np.clip(x, 0.0, 1.0)
    q = xc**3 * (10.0 - 15.0 * xc + 6.0 * xc**2)
    dq = np.where(inside, 30.0 * xc**2 * (xc - 1.0) ** 2, 0.0)
    d2q = np.where(inside, 60.0 * xc * (2.0 * xc - 1.0) * (xc - 1.0), 0.0)
    return q, dq, d2q


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


def _chain(fs, fe, fss, fse, fee, gS, gE, hS, hE):
    """Gradient and Hessian of f(s(x), eta(x)) from partial derivatives."""
    g = fs[:, None] * gS + fe[:, None] * gE
    H = (fss[:, None, None] * _outer(gS, gS)
         + fse[:, None, None] * (_outer(gS, gE) + _outer(gE, gS))
         + fee[:, None, None] * _outer(gE, gE)
         + fs[:, None, None] * hS + fe[:, None, None] * hE)
    return g, H


# -- angle form ----------------------------------------------------------------


@dataclass(frozen=True)
class AngleForm:
    """Closed 1-form (alpha / 2 pi) (-(y - b) dx + (x - a) dy) / r^2.

    Its integral over a loop winding once counter-clockwise around the
    centre is alpha; loops that do not enclose the centre give zero.
    """

    center: tuple
    alpha: float

    def __call__(self, pts):
        """Covector components (w_x, w_y) at ``pts`` (n, 2)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        d = pts - np.asarray(self.center, dtype=float)
        r2 = np.sum(d * d, axis=1)
        if np.any(r2 == 0.0):
            raise SingularPoint("angle form evaluated at its centre")
        k = self.alpha / (2.0 * math.pi) / r2
        return np.stack([-d[:, 1] * k, d[:, 0] * k], axis=1)

    def jacobian(self, pts):
        """d w_i / d x_j, shape (n, 2, 2)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        d = pts - np.asarray(self.center, dtype=float)
        r2 = np.sum(d * d, axis=1)
        if np.any(r2 == 0.0):
            raise SingularPoint("angle form evaluated at its centre")
        c = self.alpha / (2.0 * math.pi)
        x, y = d[:, 0], d[:, 1]
        J = np.empty((len(d), 2, 2))
        J[:, 0, 0] = 2 * x * y / r2**2
        J[:, 0, 1] = (y * y - x * x) / r2**2
        J[:, 1, 0] = (y * y - x * x) / r2**2
        J[:, 1, 1] = -2 * x * y / r2**2
        return c * J

    def line_integral(self, curve, n=4096):
        """Integral over a closed curve given as ``curve(theta) -> (points, velocity)``.

        The periodic trapezoid rule on [0, 2 pi) converges geometrically for
        smooth loops away from the centre.
        """
        theta = 2.0 * math.pi * np.arange(n) / n
        pts, vel = curve(theta)
        w = self(pts)
        return float(np.sum(w * vel) * (2.0 * math.pi / n))

    def polyline_integral(self, vertices):
        """Exact integral along a closed polyline (sum of subtended angles)."""
        v = np.asarray(vertices, dtype=float) - np.asarray(self.center, dtype=float)
        if np.any(np.sum(v * v, axis=1) == 0.0):
            raise SingularPoint("polyline passes through the centre")
        a, b = v, np.roll(v, -1, axis=0)
        cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        dot = np.sum(a * b, axis=1)
        return float(self.alpha / (2.0 * math.pi) * np.sum(np.arctan2(cross, dot)))


def angle_form(center, alpha) -> AngleForm:
    return AngleForm(tuple(float(c) for c in center), float(alpha))


def ellipse(center, a, b, phase=0.0):
    """Counter-clockwise ellipse parametrization usable with ``line_integral``."""
    cx, cy = center
    c, s = math.cos(phase), math.sin(phase)

    def curve(theta):
        u, v = a * np.cos(theta), b * np.sin(theta)
        du, dv = -a * np.sin(theta), b * np.cos(theta)
        pts = np.stack([cx + c * u - s * v, cy + s * u + c * v], axis=1)
        vel = np.stack([c * du - s * dv, s * du + c * dv], axis=1)
        return pts, vel

    return curve


# -- 2D carrier ---------------------------------------------------------------


def _kernel(q):
    """(1 - q)^4 on q = r^2 / rho^2 < 1, with dK/dq and d2K/dq2."""
    m = np.clip(1.0 - q, 0.0, None)
    return m**4, -4.0 * m**3, 12.0 * m**2


@dataclass
class _Arc:
    samples: np.ndarray
    tree: cKDTree = field(repr=False)


class CarrierField:
    """Stream-function carrier with prescribed outlet fluxes.

    Use :func:`build_carrier_2d` to construct.  ``evaluate`` returns the
    field and its Jacobian ``grad[n, i, j] = d a_i / d x_j``.
    """

    def __init__(self, domain, fluxes, delta, rho, s_blend, stream_constants, arcs, side_arcs):
        self.domain = domain
        self.fluxes = np.asarray(fluxes, dtype=float)
        self.delta = float(delta)
        self.cutoff_width = self.delta
        self.rho = float(rho)
        self.s_blend = float(s_blend)
        self.stream_constants = np.asarray(stream_constants, dtype=float)
        self._arcs = arcs
        # outlet i -> (right arc, left arc)
        self.side_arcs = side_arcs
        self._bounds = None

    @property
    def k(self):
        return len(self.fluxes)

    def scaled(self, lam):
        """The carrier for fluxes ``lam * alpha`` (same construction geometry)."""
        return CarrierField(self.domain, lam * self.fluxes, self.delta, self.rho, self.s_blend,
                            lam * self.stream_constants, self._arcs, self.side_arcs)

    # ---- stream function ----------------------------------------------------

    def _tube_frames(self, x):
        """Owner outlet and tube coordinates with derivatives for every point."""
        n = len(x)
        owner = np.full(n, -1)
        best = np.full(n, np.inf)
        S = np.zeros(n)
        E = np.zeros(n)
        gS = np.zeros((n, 2))
        gE = np.zeros((n, 2))
        hS = np.zeros((n, 2, 2))
        hE = np.zeros((n, 2, 2))
        for i, cl in enumerate(self.domain.centerlines):
            width = self.domain.outlets[i].halfwidth
            s_, e_, gs_, ge_, hs_, he_ = cl.locate(x, derivatives=True)
            for k, pc in enumerate(cl.pieces):
                s, e = s_[k], e_[k]
                ratio = np.abs(e) / width(np.maximum(s, 0.0))
                ok = (s >= pc.s0 - 1e-12) & (s <= pc.s1) & (s >= 0.0) & (ratio < 1.5) & (ratio < best)
                if pc.s0 > 0:
                    ok &= s >= pc.s0
                owner[ok] = i
                best[ok] = ratio[ok]
                S[ok], E[ok] = s[ok], e[ok]
                gS[ok], gE[ok] = gs_[k][ok], ge_[k][ok]
                hS[ok], hE[ok] = hs_[k][ok], he_[k][ok]
        return owner, S, E, gS, gE, hS, hE

    def _tube_psi(self, i, S, E, gS, gE, hS, hE):
        width = self.domain.outlets[i].halfwidth
        w, w1, w2 = width(S), width.deriv(S, 1), width.deriv(S, 2)
        d = 2.0 * (w - self.delta)
        u = E + w - self.delta
        lam = u / d
        lam_e = 1.0 / d
        lam_s = w1 * (d - 2.0 * u) / d**2
        lam_se = -2.0 * w1 / d**2
        lam_ss = (d - 2.0 * u) * (w2 * d - 4.0 * w1**2) / d**3
        q, dq, d2q = smoothstep(lam)
        right, left = self.side_arcs[i]
        cr, cl = self.stream_constants[right], self.stream_constants[left]
        jump = cl - cr
        psi = (1.0 - q) * cr + q * cl
        fs = jump * dq * lam_s
        fe = jump * dq * lam_e
        fss = jump * (d2q * lam_s**2 + dq * lam_ss)
        fse = jump * (d2q * lam_s * lam_e + dq * lam_se)
        fee = jump * d2q * lam_e**2
        g, H = _chain(fs, fe, fss, fse, fee, gS, gE, hS, hE)
        return psi, g, H

    def _pu_psi(self, x):
        n = len(x)
        k = len(self._arcs)
        W = np.zeros((k, n))
        gW = np.zeros((k, n, 2))
        hW = np.zeros((k, n, 2, 2))
        tree = cKDTree(x)
        r2inv = 1.0 / self.rho**2
        for j, arc in enumerate(self._arcs):
            pairs = tree.sparse_distance_matrix(arc.tree, self.rho, output_type="ndarray")
            if len(pairs) == 0:
                continue
            pi, si = pairs["i"], pairs["j"]
            d = x[pi] - arc.samples[si]
            q = np.sum(d * d, axis=1) * r2inv
            K, K1, K2 = _kernel(q)
            gK = (2.0 * r2inv * K1)[:, None] * d
            hK = (2.0 * r2inv * K1)[:, None, None] * np.eye(2) + (4.0 * r2inv**2 * K2)[:, None, None] * _outer(d, d)
            np.add.at(W[j], pi, K)
            np.add.at(gW[j], pi, gK)
            np.add.at(hW[j], pi, hK)
        Wt = W.sum(axis=0)
        if np.any(Wt <= 0):
            raise InvalidGeometry("point outside the reach of the wall-arc partition of unity")
        gWt = gW.sum(axis=0)
        hWt = hW.sum(axis=0)
        psi = np.zeros(n)
        g = np.zeros((n, 2))
        H = np.zeros((n, 2, 2))
        for j in range(k):
            c = self.stream_constants[j]
            if c == 0.0:
                continue
            phi = W[j] / Wt
            gphi = (gW[j] - phi[:, None] * gWt) / Wt[:, None]
            hphi = (hW[j] - phi[:, None, None] * hWt - _outer(gphi, gWt) - _outer(gWt, gphi)) / Wt[:, None, None]
            psi += c * phi
            g += c * gphi
            H += c * hphi
        return psi, g, H

    def stream(self, x, derivatives=True):
        """psi with gradient and Hessian at points ``x`` (n, 2)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = len(x)
        psi = np.zeros(n)
        g = np.zeros((n, 2))
        H = np.zeros((n, 2, 2))
        if not np.any(self.stream_constants):
            return (psi, g, H) if derivatives else psi
        owner, S, E, gS, gE, hS, hE = self._tube_frames(x)
        in_tube = owner >= 0
        for i in range(self.k):
            m = owner == i
            if np.any(m):
                psi[m], g[m], H[m] = self._tube_psi(i, S[m], E[m], gS[m], gE[m], hS[m], hE[m])
        need = ~in_tube | (S < self.s_blend)
        if np.any(need):
            idx = np.flatnonzero(need)
            pp, pg, pH = self._pu_psi(x[idx])
            core = ~in_tube[idx]
            psi[idx[core]], g[idx[core]], H[idx[core]] = pp[core], pg[core], pH[core]
            bl = idx[~core]
            if len(bl):
                b = ~core
                chi, dchi, d2chi = smoothstep(S[bl] / self.s_blend)
                gchi = (dchi / self.s_blend)[:, None] * gS[bl]
                hchi = ((d2chi / self.s_blend**2)[:, None, None] * _outer(gS[bl], gS[bl])
                        + (dchi / self.s_blend)[:, None, None] * hS[bl])
                dpsi = psi[bl] - pp[b]
                dg = g[bl] - pg[b]
                H[bl] = (chi[:, None, None] * H[bl] + (1 - chi)[:, None, None] * pH[b]
                         + _outer(gchi, dg) + _outer(dg, gchi) + dpsi[:, None, None] * hchi)
                g[bl] = chi[:, None] * g[bl] + (1 - chi)[:, None] * pg[b] + dpsi[:, None] * gchi
                psi[bl] = chi * psi[bl] + (1 - chi) * pp[b]
        return (psi, g, H) if derivatives else psi

    # ---- field ----------------------------------------------------------------

    def evaluate(self, x):
        """Field a (n, 2) and Jacobian (n, 2, 2) at points ``x``."""
        _, g, H = self.stream(x)
        a = np.stack([g[:, 1], -g[:, 0]], axis=1)
        J = np.stack([H[:, 1, :], -H[:, 0, :]], axis=1)
        return a, J

    def velocity(self, x):
        return self.evaluate(x)[0]

    __call__ = velocity

    def section_flux(self, i, t, panels=8, order=10):
        """Gauss-Legendre flux of a through the cross section of outlet i at depth t.

        Panels are split at the collar edges, so inside a tube the rule is
        exact for the polynomial profile.
        """
        sec = cross_section(self.domain, i, t)
        L = sec.length
        w = 0.5 * L
        brk = {-1.0, 1.0}
        for side in (-1.0, 1.0):
            lam = side * (1.0 - self.delta / w)
            if -1 < lam < 1:
                brk.add(lam)
        brk = sorted(brk)
        edges = []
        for a, b in zip(brk[:-1], brk[1:]):
            edges.extend(np.linspace(a, b, panels + 1)[:-1].tolist())
        edges.append(1.0)
        edges = np.array(edges)
        xg, wg = np.polynomial.legendre.leggauss(order)
        lo, hi = edges[:-1], edges[1:]
        lam = (0.5 * (hi - lo)[:, None] * (xg + 1) + lo[:, None]).ravel()
        wts = (0.5 * (hi - lo)[:, None] * wg).ravel()
        pts = sec.points(lam)
        a = self.velocity(pts)
        return float(np.sum(wts * (a @ sec.normal)) * w)

    def bounds(self, t=None, spacing=None):
        """Sampled sup |a| and sup |grad a| over the cut domain at depth ``t``."""
        if self._bounds is not None and t is None:
            return self._bounds
        from .geometry import cut_domain

        dom = self.domain
        t = t if t is not None else dom.t_min + self.s_blend + 4.0 * dom.w_max
        spacing = spacing or self.delta / 4.0
        cd = cut_domain(dom, t)
        poly = shapely.Polygon(cd.vertices)
        x0, y0, x1, y1 = poly.bounds
        gx, gy = np.meshgrid(np.arange(x0, x1 + spacing, spacing), np.arange(y0, y1 + spacing, spacing))
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        pts = pts[shapely.contains_xy(poly, pts[:, 0], pts[:, 1])]
        a, J = self.evaluate(pts)
        out = (float(np.max(np.linalg.norm(a, axis=1), initial=0.0)),
               float(np.max(np.sqrt(np.sum(J * J, axis=(1, 2))), initial=0.0)))
        if t is None:
            self._bounds = out
        return out

    def metadata(self):
        return {
            "fluxes": self.fluxes.tolist(),
            "stream_constants": self.stream_constants.tolist(),
            "cutoff_width": self.delta,
            "kernel_radius": self.rho,
            "blend_length": self.s_blend,
        }


def _resample(poly, spacing):
    """Points at uniform arclength spacing along an open polyline."""
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(2, math.ceil(cum[-1] / spacing) + 1)
    s = np.linspace(0.0, cum[-1], n)
    return np.column_stack([np.interp(s, cum, poly[:, 0]), np.interp(s, cum, poly[:, 1])])


def _wall_arcs(domain: ChannelDomain, s_ext, spacing):
    """Sampled wall arcs in counter-clockwise order and each outlet's (right, left) arcs."""
    k = domain.k
    order = domain.ccw_order
    core = domain.core
    nv = len(core)
    fine = np.linspace(0.0, s_ext, max(8, math.ceil(s_ext / (0.25 * spacing)) + 1))
    arcs = []
    side = {}
    for m in range(k):
        i, j = order[m], order[(m + 1) % k]
        e_i, e_j = domain.outlets[i].edge, domain.outlets[j].edge
        left_i = domain.wall_points(i, fine[::-1], +1.0)
        chain = [left_i]
        v = (e_i + 1) % nv
        corners = []
        while True:
            corners.append(core[v])
            if v == e_j:
                break
            v = (v + 1) % nv
        chain.append(np.asarray(corners))
        chain.append(domain.wall_points(j, fine, -1.0))
        arcs.append(_resample(np.vstack(chain), spacing))
        side.setdefault(i, [None, None])[1] = m
        side.setdefault(j, [None, None])[0] = m
    return arcs, {i: tuple(v) for i, v in side.items()}


def _region_points(domain, s_b, spacing):
    """Points filling the core and the first s_b units of every tube."""
    polys = [shapely.Polygon(domain.core)]
    ss = np.linspace(0.0, s_b, max(4, math.ceil(s_b / spacing) + 1))
    for i in range(domain.k):
        r = domain.wall_points(i, ss, -1.0)
        left = domain.wall_points(i, ss[::-1], +1.0)
        polys.append(shapely.Polygon(np.vstack([r, left])))
    region = shapely.union_all(polys)
    x0, y0, x1, y1 = region.bounds
    gx, gy = np.meshgrid(np.arange(x0, x1 + spacing, spacing), np.arange(y0, y1 + spacing, spacing))
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    inside = shapely.contains_xy(region.buffer(1e-9), pts[:, 0], pts[:, 1])
    return pts[inside]


def build_carrier_2d(domain: ChannelDomain, fluxes, delta=None, s_blend=None) -> CarrierField:
    """Carrier with flux ``fluxes[i]`` through every cross section of outlet i.

    ``delta`` is the collar width on which psi is exactly constant (default
    w_min / 4); ``s_blend`` the tube length over which the core construction
    hands over to the tube profile (default t_min, so every admissible cross
    section lies in the pure tube region).
    """
    fluxes = np.asarray(fluxes, dtype=float).ravel()
    if len(fluxes) != domain.k:
        raise FluxImbalance(f"expected {domain.k} fluxes, got {len(fluxes)}")
    if not np.all(np.isfinite(fluxes)):
        raise FluxImbalance("fluxes must be finite")
    if abs(fluxes.sum()) > FLUX_TOL * max(1.0, np.abs(fluxes).max()):
        raise FluxImbalance(f"fluxes sum to {fluxes.sum():.3e}, not zero")
    w_min = domain.w_min
    delta = 0.25 * w_min if delta is None else float(delta)
    if not 0 < delta <= 0.5 * w_min + 1e-15:
        raise CutoffTooWide(f"delta={delta} must lie in (0, w_min/2 = {0.5 * w_min}]")
    s_b = domain.t_min if s_blend is None else float(s_blend)
    if s_b <= 0:
        raise InvalidGeometry("blend length must be positive")

    spacing = min(0.1, 0.25 * delta)
    s_ext = s_b + 2.0 * (2 * domain.w_max) + 0.5
    samples, side = _wall_arcs(domain, s_ext, spacing)
    trees = [cKDTree(a) for a in samples]
    # kernel radius: every point of the blended region must see a wall sample,
    # and points within delta of one arc must not see any other arc
    pts = _region_points(domain, s_b, 0.5 * spacing)
    reach = 0.0
    if len(pts):
        dist = np.min(np.stack([t.query(pts)[0] for t in trees]), axis=0)
        reach = float(dist.max())
    gap = math.inf
    for a in range(len(trees)):
        for b in range(a + 1, len(trees)):
            gap = min(gap, float(trees[b].query(samples[a])[0].min()))
    lo, hi = 1.15 * reach, gap - delta - 2 * spacing
    if lo >= hi:
        if 1.15 * reach < gap - 2 * spacing:
            raise CutoffTooWide(f"delta={delta} leaves no admissible kernel radius ({lo:.3g} >= {hi:.3g})")
        raise InvalidGeometry("outlet walls too close together for the core construction")
    # a wide kernel spreads the transition between arcs over more of the core
    rho = lo + 0.75 * (hi - lo)

    # stream constants per arc, c_{k-1} = 0 exactly
    order = domain.ccw_order
    k = domain.k
    consts = np.zeros(k)
    acc = 0.0
    for m in range(k - 1):
        acc = acc + fluxes[order[m]]
        consts[m] = acc
    arcs = [_Arc(s, t) for s, t in zip(samples, trees)]
    return CarrierField(domain, fluxes, delta, rho, s_b, consts, arcs, side)


def carrier_divergence(field: CarrierField, pts, h=1e-5):
    """Central finite-difference divergence of a at ``pts``."""
    pts = np.atleast_2d(pts)
    ex = np.array([h, 0.0])
    ey = np.array([0.0, h])
    ax = (field.velocity(pts + ex)[:, 0] - field.velocity(pts - ex)[:, 0]) / (2 * h)
    ay = (field.velocity(pts + ey)[:, 1] - field.velocity(pts - ey)[:, 1]) / (2 * h)
    return ax + ay


# -- verification of the carrier estimates ----------------------------------------


@dataclass
class CarrierReport:
    """Per-t values of the three carrier estimates.

    ratio_i: max over probes of int |a|^p' |phi|^p' / (t^((p-2)/(p-1)) ||grad phi||_p^p')
    annulus_ii: int over the outlet slabs between t-1 and t of |grad a|^p
    ratio_iii: int over Omega_t of |grad a|^p, divided by t + 1
    """

    p: float
    rows: list
    growth_limit: float
    bounded: bool = True
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("t", "ratio_i", "annulus_ii", "ratio_iii")

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def spread(self, name):
        vals = self.column(name)
        vals = vals[vals > 0]
        return float(vals.max() / vals.min()) if len(vals) else 1.0

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for r in self.rows:
                fh.write(",".join(f"{r[c]:.12e}" if c != "t" else f"{r[c]:g}" for c in self.COLUMNS) + "\n")

    def summary(self):
        return {
            "p": self.p,
            "bounded": self.bounded,
            "growth_limit": self.growth_limit,
            "spread_ratio_i": self.spread("ratio_i"),
            "rows": [{k: r[k] for k in self.COLUMNS} for r in self.rows],
            "carrier": self.metadata,
        }

    def to_json(self, path):
        import json

        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def stokes_probes(space, count, rng, system=None):
    """Discretely divergence-free P2 fields vanishing on the boundary.

    Each probe is the discrete Stokes velocity for a white-noise load on the
    velocity nodes; one factorization serves all probes.
    """
    from .solver import _System

    system = system or _System(space)
    A = space.vector_laplacian()
    K = system.block(A)
    free = system.free
    solve = system.factorize(K[free][:, free])
    M = space.velocity_mass()
    n2 = space.n_p2
    nv = space.n_velocity
    out = []
    for _ in range(count):
        rhs = np.zeros(space.n_dofs + 1)
        rhs[:nv] = M @ rng.normal(size=nv)
        x = np.zeros_like(rhs)
        x[free] = solve(rhs[free])
        out.append((x[:n2].copy(), x[n2:nv].copy()))
    return out


def probe_defect(space, ux, uy, B=None):
    """Scale-free discrete divergence defect |B phi| / (|B| |phi|) and max boundary value."""
    B = space.divergence_matrix() if B is None else B
    v = np.concatenate([ux, uy])
    num = np.linalg.norm(B @ v)
    den = np.linalg.norm(abs(B) @ np.abs(v))
    nb = space.boundary_nodes
    trace = float(max(np.abs(ux[nb]).max(initial=0.0), np.abs(uy[nb]).max(initial=0.0)))
    return (num / den if den > 0 else 0.0), trace


def verify_carrier(field_: CarrierField, domain=None, t_list=(2, 4, 8, 16), probes=None, p=3.0,
                   h=0.25, n_probes=20, seed=0, growth_limit=3.0, tol=1e-8) -> CarrierReport:
    """Evaluate the carrier estimates i)-iii) on Omega_t for every t in ``t_list``.

    ``probes`` may be None (Stokes probes with random loads), a callable
    ``probes(space, rng) -> [(ux, uy), ...]`` or a mapping t -> list of
    fields.  Probes must be discretely divergence-free and vanish on the
    boundary (InvalidProbe otherwise).

    ``bounded`` is False when ratio_i varies across t by more than
    ``growth_limit`` or annulus_ii / ratio_iii exceed ``growth_limit`` times
    their value at the smallest t.
    """
    from .errors import InvalidProbe
    from .fem import TaylorHood
    from .geometry import cut_domain
    from .meshing import default_snap, mesh_cut_domain

    domain = domain or field_.domain
    t_list = [float(t) for t in t_list]
    if any(b <= a for a, b in zip(t_list, t_list[1:])):
        raise ValueError("t_list must be strictly increasing")
    rng = np.random.default_rng(seed)
    pc = p / (p - 1)
    expo = (p - 2) / (p - 1)
    rows = []
    for t in t_list:
        cd = cut_domain(domain, t)
        snap = set(default_snap(domain, t))
        if t - 1 >= domain.t_min:
            snap.add(t - 1)
        mesh = mesh_cut_domain(cd, h, snap=sorted(snap))
        space = TaylorHood(mesh)
        if probes is None:
            fields = stokes_probes(space, n_probes, rng)
        elif callable(probes):
            fields = probes(space, rng)
        else:
            fields = probes[t]
        B = space.divergence_matrix()
        qp = space.q_points.reshape(-1, 2)
        a, J = field_.evaluate(qp)
        shape = space.wdet.shape
        amag = np.linalg.norm(a, axis=1).reshape(shape)
        gmag = np.sqrt(np.sum(J * J, axis=(1, 2))).reshape(shape)
        ratios = []
        for ux, uy in fields:
            defect, trace = probe_defect(space, ux, uy, B)
            scale = max(np.abs(ux).max(initial=0.0), np.abs(uy).max(initial=0.0))
            if defect > tol or trace > tol * max(scale, 1e-300):
                raise InvalidProbe(f"probe is not a discrete divergence-free zero-trace field "
                                   f"(defect {defect:.2e}, trace {trace:.2e})")
            V = space.values(ux, uy)
            G = space.gradients(ux, uy)
            num = space.integrate(amag**pc * np.linalg.norm(V, axis=-1) ** pc)
            gp = space.integrate(np.sum(G * G, axis=(-2, -1)) ** (p / 2))
            ratios.append(0.0 if num == 0.0 else num / (t**expo * gp ** (pc / p)))
        lo = max(t - 1.0, domain.t_min)
        slab = (mesh.tri_outlet >= 0) & (mesh.tri_depth > lo + 1e-12) if t - 1 >= domain.t_min \
            else (mesh.tri_outlet >= 0)
        ann = space.integrate(gmag[slab] ** p, slab)
        total = space.integrate(gmag**p)
        rows.append({"t": t, "ratio_i": float(max(ratios, default=0.0)),
                     "ratio_i_mean": float(np.mean(ratios)) if ratios else 0.0,
                     "annulus_ii": float(ann), "ratio_iii": float(total / (t + 1)),
                     "probes": len(fields), "triangles": int(len(mesh.triangles))})
    report = CarrierReport(p, rows, growth_limit, metadata=field_.metadata())
    ok = report.spread("ratio_i") <= growth_limit
    for name in ("annulus_ii", "ratio_iii"):
        col = report.column(name)
        if col[0] > 0:
            ok &= bool(col.max() <= growth_limit * col[0])
        else:
            ok &= bool(np.all(col == 0))
    report.bounded = bool(ok)
    return report


def write_carrier_vtk(field_: CarrierField, mesh, path):
    """Carrier samples at the mesh vertices as VTK point data (velocity, stream function, |grad a|)."""
    from .meshing import write_vtk

    a, J = field_.evaluate(mesh.vertices)
    psi = field_.stream(mesh.vertices)[0]
    write_vtk(mesh, path, point_data={
        "carrier": a,
        "stream": np.asarray(psi, dtype=float),
        "grad_norm": np.sqrt(np.sum(J * J, axis=(1, 2))),
    })
