"""Channel domains: a polygonal core with k outlet tubes attached to its edges.

Each outlet is the image of the tube map ``(s, lam) -> c(s) + lam * w(s) * n(s)``
where ``c`` is an arclength-parametrized centerline made of straight and
circular pieces (followed by an infinite straight ray), ``n`` is its left
normal and ``w`` the half-width.  Truncating every outlet at arclength ``t``
gives the bounded cut domain used by the solvers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import shapely

from .errors import DomainTooSmall, InvalidGeometry, UnknownOutlet

WALL = -1
"""Boundary tag for solid walls; cut faces carry the outlet index (>= 0)."""

_S_TOL = 1e-12


def rot90(v):
    v = np.asarray(v, dtype=float)
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def polygon_area(vertices) -> float:
    """Signed shoelace area (positive for counter-clockwise vertex order)."""
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True)
class HalfWidth:
    """w(s) = base + sum(amp * sin(freq * s + phase))."""

    base: float = 1.0
    terms: tuple = ()

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        w = np.full_like(s, self.base)
        for amp, freq, phase in self.terms:
            w = w + amp * np.sin(freq * s + phase)
        return w

    def deriv(self, s, order=1):
        s = np.asarray(s, dtype=float)
        out = np.zeros_like(s)
        for amp, freq, phase in self.terms:
            # d^n/ds^n sin(x) = sin(x + n*pi/2)
            out = out + amp * freq**order * np.sin(freq * s + phase + order * math.pi / 2)
        return out

    @property
    def w_min(self) -> float:
        return self.base - sum(abs(a) for a, _, _ in self.terms)

    @property
    def w_max(self) -> float:
        return self.base + sum(abs(a) for a, _, _ in self.terms)

    def to_dict(self):
        return {"base": self.base, "terms": [list(t) for t in self.terms]}

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, (int, float)):
            return cls(float(d))
        terms = []
        for term in d.get("terms", []):
            amp, freq = float(term[0]), float(term[1])
            phase = float(term[2]) if len(term) > 2 else 0.0
            terms.append((amp, freq, phase))
        return cls(float(d.get("base", 1.0)), tuple(terms))


@dataclass(frozen=True)
class Piece:
    """One centerline piece: a straight segment or a circular arc.

    ``angle`` is the signed turning angle of an arc (positive = left turn).
    A line with ``length=inf`` is the terminal ray.
    """

    kind: str
    length: float
    start: tuple
    tangent: tuple
    s0: float
    radius: float = math.inf
    angle: float = 0.0

    @property
    def s1(self):
        return self.s0 + self.length

    @property
    def sign(self):
        return 1.0 if self.angle >= 0 else -1.0

    @property
    def center(self):
        n0 = rot90(self.tangent)
        return np.asarray(self.start) + self.sign * self.radius * n0


class Centerline:
    """Arclength-parametrized piecewise line/arc curve ending in a ray."""

    def __init__(self, start, direction, pieces: Sequence[Sequence]):
        direction = np.asarray(direction, dtype=float)
        direction = direction / np.linalg.norm(direction)
        self.spec = [tuple(p) for p in pieces]
        built = []
        p = np.asarray(start, dtype=float)
        tvec = direction
        s0 = 0.0
        for item in self.spec:
            kind = item[0]
            if kind == "line":
                length = float(item[1])
                if length <= 0:
                    raise InvalidGeometry("line piece needs positive length")
                built.append(Piece("line", length, tuple(p), tuple(tvec), s0))
                p = p + length * tvec
            elif kind == "arc":
                radius, angle = float(item[1]), float(item[2])
                if radius <= 0 or angle == 0:
                    raise InvalidGeometry("arc piece needs positive radius and nonzero angle")
                length = radius * abs(angle)
                piece = Piece("arc", length, tuple(p), tuple(tvec), s0, radius, angle)
                built.append(piece)
                c = piece.center
                rel = p - c
                ca, sa = math.cos(angle), math.sin(angle)
                p = c + np.array([ca * rel[0] - sa * rel[1], sa * rel[0] + ca * rel[1]])
                tvec = np.array([ca * tvec[0] - sa * tvec[1], sa * tvec[0] + ca * tvec[1]])
            else:
                raise InvalidGeometry(f"unknown centerline piece {kind!r}")
            s0 += length
        built.append(Piece("line", math.inf, tuple(p), tuple(tvec), s0))
        self.pieces = built

    def _piece_index(self, s):
        s = np.asarray(s, dtype=float)
        starts = np.array([pc.s0 for pc in self.pieces])
        return np.clip(np.searchsorted(starts, s, side="right") - 1, 0, len(self.pieces) - 1)

    def frame(self, s):
        """Return (point, unit tangent, curvature) at arclength ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        idx = self._piece_index(s)
        pts = np.empty(s.shape + (2,))
        tan = np.empty(s.shape + (2,))
        kap = np.zeros(s.shape)
        for k, pc in enumerate(self.pieces):
            m = idx == k
            if not np.any(m):
                continue
            ds = s[m] - pc.s0
            t0 = np.asarray(pc.tangent)
            if pc.kind == "line":
                pts[m] = np.asarray(pc.start) + ds[:, None] * t0
                tan[m] = t0
            else:
                phi = pc.sign * ds / pc.radius
                c, sn = np.cos(phi), np.sin(phi)
                rel = np.asarray(pc.start) - pc.center
                pts[m] = pc.center + np.stack(
                    [c * rel[0] - sn * rel[1], sn * rel[0] + c * rel[1]], axis=-1
                )
                tan[m] = np.stack([c * t0[0] - sn * t0[1], sn * t0[0] + c * t0[1]], axis=-1)
                kap[m] = pc.sign / pc.radius
        return pts, tan, kap

    def point(self, s):
        return self.frame(s)[0]

    def tangent(self, s):
        return self.frame(s)[1]

    def normal(self, s):
        return rot90(self.frame(s)[1])

    def locate(self, x, derivatives=False):
        """Tube coordinates (s, eta) of points ``x`` for every piece.

        Returns arrays of shape (npieces, npts) for s and eta; with
        ``derivatives`` also gradients (npieces, npts, 2) and Hessians
        (npieces, npts, 2, 2) of both coordinates.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        npc = len(self.pieces)
        S = np.empty((npc, len(x)))
        E = np.empty((npc, len(x)))
        if derivatives:
            gS = np.zeros((npc, len(x), 2))
            gE = np.zeros((npc, len(x), 2))
            hS = np.zeros((npc, len(x), 2, 2))
            hE = np.zeros((npc, len(x), 2, 2))
        for k, pc in enumerate(self.pieces):
            t0 = np.asarray(pc.tangent)
            n0 = rot90(t0)
            if pc.kind == "line":
                d = x - np.asarray(pc.start)
                S[k] = pc.s0 + d @ t0
                E[k] = d @ n0
                if derivatives:
                    gS[k] = t0
                    gE[k] = n0
                continue
            c = pc.center
            sig = pc.sign
            v = x - c
            r = np.hypot(v[:, 0], v[:, 1])
            v0 = np.asarray(pc.start) - c
            cross = v0[0] * v[:, 1] - v0[1] * v[:, 0]
            dot = v0[0] * v[:, 0] + v0[1] * v[:, 1]
            theta = np.arctan2(cross, dot)
            # unwrap so the arc's own angular range is contiguous
            span = abs(pc.angle)
            phi = sig * theta
            phi = np.where(phi < -0.5 * (2 * math.pi - span), phi + 2 * math.pi, phi)
            S[k] = pc.s0 + pc.radius * phi
            E[k] = sig * (pc.radius - r)
            if derivatives:
                rs = np.where(r > 0, r, 1.0)
                er = v / rs[:, None]
                et = rot90(er)
                gE[k] = -sig * er
                gS[k] = sig * pc.radius * et / rs[:, None]
                eye = np.eye(2)
                hE[k] = -sig * (eye - er[:, :, None] * er[:, None, :]) / rs[:, None, None]
                sym = et[:, :, None] * er[:, None, :] + er[:, :, None] * et[:, None, :]
                hS[k] = -sig * pc.radius * sym / (rs**2)[:, None, None]
        if derivatives:
            return S, E, gS, gE, hS, hE
        return S, E

    def max_curvature_width(self, width: HalfWidth, samples_per_unit=64) -> float:
        worst = 0.0
        for pc in self.pieces:
            if pc.kind != "arc":
                continue
            s = np.linspace(pc.s0, pc.s1, max(8, int(samples_per_unit * pc.length)))
            worst = max(worst, float(np.max(width(s))) / pc.radius)
        return worst


@dataclass(frozen=True)
class OutletSpec:
    edge: int
    pieces: tuple
    halfwidth: HalfWidth
    flux_index: int


@dataclass(frozen=True)
class CrossSection:
    outlet: int
    t: float
    right: np.ndarray
    left: np.ndarray
    normal: np.ndarray

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.left - self.right))

    def points(self, lam):
        """Points at normalized positions ``lam`` in [-1, 1] (right to left)."""
        lam = np.asarray(lam, dtype=float)
        mid = 0.5 * (self.left + self.right)
        half = 0.5 * (self.left - self.right)
        return mid + lam[..., None] * half


class ChannelDomain:
    """Bounded core polygon plus k >= 2 outlet tubes.

    ``core`` is a simple counter-clockwise polygon; outlet ``i`` attaches to
    core edge ``outlets[i].edge`` (from vertex ``edge`` to ``edge + 1``) at its
    midpoint, pointing along the outward edge normal, with ``w(0)`` equal to
    half the edge length.
    """

    def __init__(self, core, outlets: Sequence[OutletSpec], t_min: float = 1.0):
        core = np.asarray(core, dtype=float)
        if polygon_area(core) <= 0:
            raise InvalidGeometry("core polygon must be counter-clockwise with positive area")
        if not shapely.Polygon(core).is_valid:
            raise InvalidGeometry("core polygon is not simple")
        if len(outlets) < 2:
            raise InvalidGeometry("a channel domain needs at least two outlets")
        edges = [o.edge for o in outlets]
        if len(set(edges)) != len(edges):
            raise InvalidGeometry("outlets must attach to distinct core edges")
        if t_min <= 0:
            raise InvalidGeometry("t_min must be positive")
        self.core = core
        self.outlets = list(outlets)
        self.t_min = float(t_min)
        self.centerlines = []
        nv = len(core)
        for o in self.outlets:
            if not 0 <= o.edge < nv:
                raise InvalidGeometry(f"edge index {o.edge} out of range")
            a, b = core[o.edge], core[(o.edge + 1) % nv]
            length = float(np.linalg.norm(b - a))
            outward = -rot90(b - a) / length
            w0 = float(o.halfwidth(0.0))
            if abs(w0 - 0.5 * length) > 1e-9 * max(1.0, length):
                raise InvalidGeometry(
                    f"outlet on edge {o.edge}: w(0)={w0} must equal half the edge length {0.5 * length}"
                )
            if o.halfwidth.w_min <= 0:
                raise InvalidGeometry("half-width must stay positive")
            cl = Centerline(0.5 * (a + b), outward, o.pieces)
            if cl.max_curvature_width(o.halfwidth) >= 1.0:
                raise InvalidGeometry(
                    f"outlet on edge {o.edge}: |curvature| * width >= 1, tube map not injective"
                )
            self.centerlines.append(cl)
        # counter-clockwise outlet ordering drives the wall-arc numbering
        self.ccw_order = sorted(range(len(self.outlets)), key=lambda i: self.outlets[i].edge)
        probe = self.t_min + sum(cl.pieces[-1].s0 for cl in self.centerlines) + 2.0
        poly = shapely.Polygon(cut_domain(self, probe, ds=0.25).vertices)
        if not poly.is_valid:
            raise InvalidGeometry("outlet tubes overlap each other or the core")

    @property
    def k(self) -> int:
        return len(self.outlets)

    @property
    def core_area(self) -> float:
        return polygon_area(self.core)

    @property
    def w_min(self) -> float:
        return min(o.halfwidth.w_min for o in self.outlets)

    @property
    def w_max(self) -> float:
        return max(o.halfwidth.w_max for o in self.outlets)

    def halfwidth(self, i):
        return self.outlets[i].halfwidth

    def wall_points(self, i, s, side):
        """Points of the right (side=-1) or left (side=+1) wall of outlet i."""
        cl = self.centerlines[i]
        pts, tan, _ = cl.frame(s)
        return pts + side * self.outlets[i].halfwidth(s)[:, None] * rot90(tan)

    def locate(self, x):
        """Map points to (outlet, s, eta); outlet is -1 for points outside all tubes."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        owner = np.full(len(x), -1)
        s_out = np.full(len(x), np.nan)
        e_out = np.full(len(x), np.nan)
        best = np.full(len(x), np.inf)
        for i, cl in enumerate(self.centerlines):
            S, E = cl.locate(x)
            w = self.outlets[i].halfwidth
            for k, pc in enumerate(cl.pieces):
                s, e = S[k], E[k]
                ok = (s >= pc.s0 - 1e-9) & (s <= pc.s1 + 1e-9) & (s >= -1e-12)
                ok &= np.abs(e) <= w(np.maximum(s, 0.0)) * (1 + 1e-9) + 1e-12
                ok &= np.abs(e) < best
                owner[ok] = i
                s_out[ok] = s[ok]
                e_out[ok] = e[ok]
                best[ok] = np.abs(e[ok])
        return owner, s_out, e_out

    def to_dict(self):
        return {
            "version": 1,
            "core": self.core.tolist(),
            "t_min": self.t_min,
            "outlets": [
                {
                    "edge": o.edge,
                    "pieces": [list(p) for p in o.pieces],
                    "halfwidth": o.halfwidth.to_dict(),
                }
                for o in self.outlets
            ],
        }

    def digest(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class CutDomain:
    """Polygonal truncation of a channel domain at outlet arclength ``t``.

    Segment ``j`` joins ``vertices[j]`` and ``vertices[j + 1]`` (cyclically)
    and carries ``tags[j]``: ``WALL`` or the index of the cut outlet.
    """

    t: float
    parent: ChannelDomain = field(repr=False)
    vertices: np.ndarray = field(repr=False)
    tags: np.ndarray = field(repr=False)
    ds: float = 0.1

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    def cut_groups(self):
        """Outlet index -> list of segment indices tagged CUT(i)."""
        groups = {}
        for j, tag in enumerate(self.tags):
            if tag != WALL:
                groups.setdefault(int(tag), []).append(j)
        return groups

    def contains(self, pts, tol=1e-9):
        poly = shapely.Polygon(self.vertices).buffer(tol)
        pts = np.atleast_2d(pts)
        return shapely.contains_xy(poly, pts[:, 0], pts[:, 1])

    def resample(self, ds):
        return cut_domain(self.parent, self.t, ds=ds)

    def wkt(self) -> str:
        ring = list(self.vertices) + [self.vertices[0]]
        body = ", ".join(f"{x:.12g} {y:.12g}" for x, y in ring)
        return f"POLYGON (({body}))"


def arclength_grid(t, ds):
    """Wall sample positions 0..t on a grid of spacing 1/m that hits every integer."""
    m = max(1, math.ceil(1.0 / ds - 1e-12))
    step = 1.0 / m
    n = int(math.floor(t / step + 1e-9))
    s = np.arange(n + 1) * step
    near = np.abs(s - np.round(s)) < 1e-9
    s[near] = np.round(s[near])
    if t - s[-1] > 1e-9:
        s = np.append(s, t)
    else:
        s[-1] = t
    return s


def section_points(domain, i, t, ds):
    """Points along the cross section of outlet i at t, right wall to left wall."""
    sec = cross_section(domain, i, t)
    n = max(2, math.ceil(sec.length / ds - 1e-9))
    return sec.points(np.linspace(-1.0, 1.0, n + 1))


def cut_domain(domain: ChannelDomain, t: float, ds: float | None = None) -> CutDomain:
    """Core plus every outlet tube truncated at arclength ``t``."""
    if t < domain.t_min - 1e-12:
        raise DomainTooSmall(f"t={t} is below t_min={domain.t_min}")
    if ds is None:
        ds = min(0.25, 0.5 * domain.w_min)
    core = domain.core
    nv = len(core)
    by_edge = {o.edge: i for i, o in enumerate(domain.outlets)}
    verts, tags = [], []
    for e in range(nv):
        a, b = core[e], core[(e + 1) % nv]
        if e in by_edge:
            i = by_edge[e]
            s = arclength_grid(t, ds)
            right = domain.wall_points(i, s, -1.0)
            right[0] = a
            left = domain.wall_points(i, s[::-1], +1.0)
            left[-1] = b
            sec = section_points(domain, i, t, ds)
            chain = [right[:-1], sec[:-1], left[:-1]]
            chain_tags = [np.full(len(right) - 1, WALL), np.full(len(sec) - 1, i),
                          np.full(len(left) - 1, WALL)]
            verts.extend(chain)
            tags.extend(chain_tags)
        else:
            length = float(np.linalg.norm(b - a))
            n = max(1, math.ceil(length / ds - 1e-9))
            lam = np.arange(n)[:, None] / n
            verts.append(a + lam * (b - a))
            tags.append(np.full(n, WALL))
    return CutDomain(float(t), domain, np.vstack(verts), np.concatenate(tags).astype(int), ds)


def cross_section(domain: ChannelDomain, i: int, t: float) -> CrossSection:
    if not 0 <= i < domain.k:
        raise UnknownOutlet(f"no outlet with index {i}")
    if t < domain.t_min - 1e-12:
        raise DomainTooSmall(f"t={t} is below t_min={domain.t_min}")
    cl = domain.centerlines[i]
    pts, tan, _ = cl.frame([t])
    w = float(domain.outlets[i].halfwidth(t))
    n = rot90(tan[0])
    return CrossSection(i, float(t), pts[0] - w * n, pts[0] + w * n, tan[0].copy())


@dataclass
class VolumeGrowthReport:
    rows: list
    bound: float
    violated: bool


def validate_volume_growth(domain: ChannelDomain, t_list, ds=None) -> VolumeGrowthReport:
    """Areas |Omega_t| and ratios |Omega_t|/t, flagged against |core|/t_min + 2 k w_max."""
    t_list = [float(t) for t in t_list]
    if any(b <= a for a, b in zip(t_list, t_list[1:])):
        raise ValueError("t_list must be strictly increasing")
    bound = domain.core_area / domain.t_min + 2 * domain.k * domain.w_max
    rows = []
    for t in t_list:
        area = cut_domain(domain, t, ds=ds).area
        rows.append((t, area, area / t))
    violated = any(r[2] > bound for r in rows)
    return VolumeGrowthReport(rows, bound, violated)


# -- construction helpers ----------------------------------------------------


def domain_from_dict(d) -> ChannelDomain:
    try:
        core = d["core"]
        outlets = [
            OutletSpec(
                edge=int(o["edge"]),
                pieces=tuple(tuple(p) for p in o.get("pieces", [])),
                halfwidth=HalfWidth.from_dict(o.get("halfwidth", 1.0)),
                flux_index=i,
            )
            for i, o in enumerate(d["outlets"])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidGeometry(f"malformed domain description: {exc}") from exc
    return ChannelDomain(core, outlets, t_min=float(d.get("t_min", 1.0)))


def load_domain(path) -> ChannelDomain:
    return domain_from_dict(json.loads(Path(path).read_text()))


def straight_strip(halfwidth=1.0, core_length=2.0, t_min=1.0, width=None) -> ChannelDomain:
    """Rectangle core [-L/2, L/2] x [-w, w] with outlets to the left and right."""
    h = float(halfwidth)
    L = float(core_length)
    core = [(-L / 2, -h), (L / 2, -h), (L / 2, h), (-L / 2, h)]
    w = width if width is not None else HalfWidth(h)
    outlets = [OutletSpec(3, (), w, 0), OutletSpec(1, (), w, 1)]
    return ChannelDomain(core, outlets, t_min)


def t_junction(halfwidth=1.0, t_min=1.0) -> ChannelDomain:
    """Square core with outlets to the left, right and bottom."""
    h = float(halfwidth)
    core = [(-h, -h), (h, -h), (h, h), (-h, h)]
    w = HalfWidth(h)
    outlets = [OutletSpec(3, (), w, 0), OutletSpec(1, (), w, 1), OutletSpec(0, (), w, 2)]
    return ChannelDomain(core, outlets, t_min)


def s_channel(halfwidth=1.0, radius=3.0, lead=1.0, t_min=1.0) -> ChannelDomain:
    """Square core; the right outlet bends left then right (an S), the left one is straight."""
    h = float(halfwidth)
    core = [(-h, -h), (h, -h), (h, h), (-h, h)]
    w = HalfWidth(h)
    quarter = math.pi / 2
    bend = (("line", lead), ("arc", radius, quarter), ("arc", radius, -quarter))
    outlets = [OutletSpec(3, (), w, 0), OutletSpec(1, bend, w, 1)]
    return ChannelDomain(core, outlets, t_min)
