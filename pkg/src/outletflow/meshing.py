"""Section-snapped triangular meshes of cut domains.

The cut domain is split into a base block (the truncation at ``t_min``) and
one slab per outlet between consecutive snap depths.  Every piece is meshed
independently by Triangle (constrained Delaunay with Ruppert-type quality
refinement) with Steiner points forbidden on piece boundaries, so shared
sections carry identical vertices and the pieces glue conformingly.  The
mesh of a shallower truncation is therefore a literal sub-mesh of a deeper
one, which keeps subdomain integrals free of interpolation error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
import triangle

from .errors import DomainTooSmall, InvalidGeometry, MeshTooCoarse, SectionNotAligned
from .geometry import WALL, ChannelDomain, CutDomain, arclength_grid, cut_domain, polygon_area, section_points

MIN_ANGLE = 25.0
# Triangle's refined elements average well below the area bound; this
# bound puts the mean edge length near h
AREA_FACTOR = 0.65


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    h: float
    tri_outlet: np.ndarray = None
    tri_depth: np.ndarray = None
    snap: tuple = ()
    t: float = None
    domain: ChannelDomain = field(default=None, repr=False)
    parent_triangles: np.ndarray = None

    def __post_init__(self):
        n = len(self.triangles)
        if self.tri_outlet is None:
            self.tri_outlet = np.full(n, -1)
        if self.tri_depth is None:
            self.tri_depth = np.zeros(n)

    @property
    def n_vertices(self):
        return len(self.vertices)

    def signed_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def area(self) -> float:
        return float(np.sum(self.signed_areas()))

    def angles(self):
        """Interior angles in degrees, shape (ntri, 3)."""
        p = self.vertices[self.triangles]
        out = np.empty((len(p), 3))
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cosang = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            out[:, k] = np.degrees(np.arccos(np.clip(cosang, -1, 1)))
        return out

    def edge_lengths(self):
        p = self.vertices[self.triangles]
        return np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)

    def edges(self):
        """Unique edges (sorted vertex pairs) and the number of triangles on each."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq, counts

    def is_conforming(self) -> bool:
        uniq, counts = self.edges()
        if np.any(counts > 2):
            return False
        bnd = uniq[counts == 1]
        mine = np.sort(self.boundary_edges, axis=1)
        return len(bnd) == len(mine) and np.array_equal(
            bnd[np.lexsort(bnd.T[::-1])], mine[np.lexsort(mine.T[::-1])]
        )

    def cut_edge_groups(self):
        return {int(t): np.flatnonzero(self.boundary_tags == t)
                for t in np.unique(self.boundary_tags) if t != WALL}


def _pslg(vertices, tags):
    n = len(vertices)
    segs = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
    return segs, np.asarray(tags, dtype=int)


def _triangulate(vertices, h, min_angle=MIN_ANGLE, fix_boundary=True):
    segs, _ = _pslg(vertices, np.zeros(len(vertices)))
    area = AREA_FACTOR * h * h
    opts = f"pq{min_angle}a{area:.17g}Q"
    if fix_boundary:
        opts += "Y"
    out = triangle.triangulate({"vertices": np.asarray(vertices, float), "segments": segs}, opts)
    if "triangles" not in out or len(out["triangles"]) == 0:
        raise InvalidGeometry("triangulation produced no elements")
    return out["vertices"], out["triangles"]


def _boundary(triangles):
    e = np.sort(triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise InvalidGeometry("non-manifold edge in merged mesh")
    return uniq[counts == 1]


def _orient(vertices, tris):
    p = vertices[tris]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    neg = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    tris = tris.copy()
    tris[neg] = tris[neg][:, [0, 2, 1]]
    return tris


def mesh_polygon(vertices, tags=None, h=0.25, min_angle=MIN_ANGLE) -> Mesh:
    """Quality mesh of a tagged simple polygon, boundary spacing ``h``.

    Polygon segments longer than ``h`` are split uniformly first; with
    boundary Steiner points forbidden, every boundary edge inherits the tag
    of the segment it lies on.
    """
    import shapely

    vertices = np.asarray(vertices, dtype=float)
    if not shapely.Polygon(vertices).is_valid:
        raise InvalidGeometry("polygon self-intersects")
    if polygon_area(vertices) < 0:
        vertices = vertices[::-1]
        if tags is not None:
            tags = np.roll(np.asarray(tags)[::-1], -1)
    n = len(vertices)
    tags = np.full(n, WALL) if tags is None else np.asarray(tags, dtype=int)
    pts, ptags = [], []
    for j in range(n):
        a, b = vertices[j], vertices[(j + 1) % n]
        m = max(1, math.ceil(np.linalg.norm(b - a) / h - 1e-9))
        pts.append(a + (np.arange(m)[:, None] / m) * (b - a))
        ptags.append(np.full(m, tags[j]))
    pts = np.vstack(pts)
    ptags = np.concatenate(ptags)
    verts, tris = _triangulate(pts, h, min_angle)
    tris = _orient(verts, tris)
    bnd = _boundary(tris)
    # boundary vertices keep their input order, so segment j is (j, j+1)
    nb = len(pts)
    lo, hi = bnd.min(axis=1), bnd.max(axis=1)
    seg = np.where((hi == lo + 1), lo, hi)  # wrap-around edge (0, nb-1) belongs to nb-1
    seg = np.where((lo == 0) & (hi == nb - 1), nb - 1, seg)
    return Mesh(verts, tris, bnd, ptags[seg], h)


def default_snap(domain: ChannelDomain, t: float):
    """t_min, every integer strictly between t_min and t, and t itself."""
    lo = domain.t_min
    ints = [float(k) for k in range(math.floor(lo) + 1, math.ceil(t)) if lo < k < t]
    snap = [lo] + ints
    if t > lo + 1e-12:
        snap.append(float(t))
    return tuple(snap)


def _slab_polygon(domain, i, a, b, grid, ds):
    s = grid[(grid >= a - 1e-12) & (grid <= b + 1e-12)]
    right = domain.wall_points(i, s, -1.0)
    left = domain.wall_points(i, s[::-1], +1.0)
    far = section_points(domain, i, b, ds)
    near = section_points(domain, i, a, ds)[::-1]
    return np.vstack([right[:-1], far[:-1], left[:-1], near[:-1]])


def mesh_cut_domain(cd: CutDomain, h: float, snap=None, min_angle=MIN_ANGLE) -> Mesh:
    """Conforming quality mesh of ``cd`` whose snap sections are mesh lines."""
    domain = cd.parent
    if h > 0.5 * domain.w_min + 1e-12:
        raise MeshTooCoarse(f"h={h} exceeds w_min/2={0.5 * domain.w_min}")
    t = cd.t
    snap = default_snap(domain, t) if snap is None else tuple(sorted(float(x) for x in snap))
    if snap[0] < domain.t_min - 1e-12 or snap[-1] > t + 1e-12:
        raise SectionNotAligned("snap depths must lie in [t_min, t]")
    if abs(snap[-1] - t) > 1e-12:
        snap = snap + (float(t),)
    grid = arclength_grid(t, h)
    for tau in snap:
        if not np.any(np.abs(grid - tau) < 1e-12):
            grid = np.sort(np.append(grid, tau))

    pieces = []
    base = cut_domain(domain, snap[0], ds=h)
    pieces.append((base.vertices, -1, snap[0]))
    for i in range(domain.k):
        for a, b in zip(snap[:-1], snap[1:]):
            pieces.append((_slab_polygon(domain, i, a, b, grid, h), i, b))

    all_v, all_t, owner, depth = [], [], [], []
    offset = 0
    for poly, i, d in pieces:
        verts, tris = _triangulate(poly, h, min_angle)
        all_v.append(verts)
        all_t.append(tris + offset)
        owner.append(np.full(len(tris), i))
        depth.append(np.full(len(tris), d))
        offset += len(verts)
    V = np.vstack(all_v)
    T = np.vstack(all_t)
    V, T = _glue(V, T, 1e-9 * max(1.0, float(np.abs(V).max())))
    T = _orient(V, T)
    bnd = _boundary(T)
    tags = _tag_boundary(domain, t, V, bnd)
    return Mesh(V, T, bnd, tags, h, np.concatenate(owner), np.concatenate(depth),
                tuple(snap), float(t), domain)


def _glue(V, T, tol):
    """Merge vertices closer than ``tol`` (shared piece boundaries agree only up to rounding)."""
    pairs = cKDTree(V).query_pairs(tol, output_type="ndarray")
    n = len(V)
    if len(pairs):
        g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        _, label = connected_components(g, directed=False)
    else:
        label = np.arange(n)
    # representative: first vertex of each cluster, then renumber compactly
    first = np.full(label.max() + 1, n)
    np.minimum.at(first, label, np.arange(n))
    rep = first[label]
    used, inverse = np.unique(rep, return_inverse=True)
    return V[used], inverse[T]


def _tag_boundary(domain, t, V, bnd):
    mid = 0.5 * (V[bnd[:, 0]] + V[bnd[:, 1]])
    owner, s, _ = domain.locate(mid)
    tags = np.full(len(bnd), WALL)
    on_cut = (owner >= 0) & (np.abs(s - t) < 1e-9 * max(1.0, t))
    tags[on_cut] = owner[on_cut]
    return tags


def submesh(mesh: Mesh, inner) -> Mesh:
    """Restriction of a section-snapped mesh to Omega_tau.

    ``inner`` is a CutDomain or a depth tau; tau must be one of the mesh's
    snap depths.
    """
    tau = inner.t if isinstance(inner, CutDomain) else float(inner)
    domain = mesh.domain
    if domain is not None and tau < domain.t_min - 1e-12:
        raise DomainTooSmall(f"tau={tau} is below t_min={domain.t_min}")
    if not any(abs(tau - s) < 1e-12 for s in mesh.snap):
        raise SectionNotAligned(f"tau={tau} is not a snap depth of this mesh {mesh.snap}")
    keep = np.flatnonzero(mesh.tri_depth <= tau + 1e-12)
    tris = mesh.triangles[keep]
    used, inv = np.unique(tris, return_inverse=True)
    T = inv.reshape(tris.shape)
    V = mesh.vertices[used]
    bnd = _boundary(T)
    tags = _tag_boundary(domain, tau, V, bnd)
    return Mesh(V, T, bnd, tags, mesh.h, mesh.tri_outlet[keep], mesh.tri_depth[keep],
                tuple(s for s in mesh.snap if s <= tau + 1e-12), tau, domain, keep)


def region_mask(mesh: Mesh, tau: float):
    """Boolean triangle mask of Omega_tau (tau must be a snap depth)."""
    if not any(abs(tau - s) < 1e-12 for s in mesh.snap):
        raise SectionNotAligned(f"tau={tau} is not a snap depth of this mesh")
    return mesh.tri_depth <= tau + 1e-12


def slab_mask(mesh: Mesh, outlet: int, a: float, b: float):
    """Triangles of outlet ``outlet`` between snap depths a and b."""
    for x in (a, b):
        if not any(abs(x - s) < 1e-12 for s in mesh.snap):
            raise SectionNotAligned(f"{x} is not a snap depth of this mesh")
    return (mesh.tri_outlet == outlet) & (mesh.tri_depth > a + 1e-12) & (mesh.tri_depth <= b + 1e-12)


# -- export ------------------------------------------------------------------


def write_vtk(mesh: Mesh, path, point_data=None, cell_data=None, title="outletflow"):
    """VTK legacy ASCII unstructured grid (linear triangles).

    ``point_data`` values are per-vertex scalars (n,) or vectors (n, 2);
    floats are written with 17 significant digits.
    """
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.n_vertices} double")
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices]
    nt = len(mesh.triangles)
    lines.append(f"CELLS {nt} {4 * nt}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {nt}")
    lines += ["5"] * nt
    for header, data, count in (("POINT_DATA", point_data, mesh.n_vertices),
                                ("CELL_DATA", cell_data, nt)):
        if not data:
            continue
        lines.append(f"{header} {count}")
        for name, values in data.items():
            values = np.asarray(values, dtype=float)
            if values.ndim == 1:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [f"{v:.17g}" for v in values]
            else:
                lines.append(f"VECTORS {name} double")
                lines += [f"{v[0]:.17g} {v[1]:.17g} 0" for v in values]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_node_ele(mesh: Mesh, prefix):
    """Plain-text ``.node`` / ``.ele`` / ``.edge`` files (Triangle's layout, 0-based)."""
    with open(f"{prefix}.node", "w") as fh:
        fh.write(f"{mesh.n_vertices} 2 0 0\n")
        for j, (x, y) in enumerate(mesh.vertices):
            fh.write(f"{j} {x:.17g} {y:.17g}\n")
    with open(f"{prefix}.ele", "w") as fh:
        fh.write(f"{len(mesh.triangles)} 3 2\n")
        for j, (a, b, c) in enumerate(mesh.triangles):
            fh.write(f"{j} {a} {b} {c} {mesh.tri_outlet[j]} {mesh.tri_depth[j]:.17g}\n")
    with open(f"{prefix}.edge", "w") as fh:
        fh.write(f"{len(mesh.boundary_edges)} 1\n")
        for j, ((a, b), tag) in enumerate(zip(mesh.boundary_edges, mesh.boundary_tags)):
            fh.write(f"{j} {a} {b} {tag}\n")
