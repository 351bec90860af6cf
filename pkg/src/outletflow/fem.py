"""P2 velocity / P1 pressure (Taylor-Hood) spaces on triangle meshes.

Local node order: vertices 0, 1, 2 then edge midpoints (0,1), (1,2), (2,0).
All element quantities are vectorized over triangles and quadrature points.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import SectionNotAligned
from .geometry import WALL

# Dunavant degree-5 rule, 7 points; weights sum to 1 (multiply by area)
_a1, _b1 = 0.059715871789770, 0.470142064105115
_a2, _b2 = 0.797426985353087, 0.101286507323456
QUAD_POINTS = np.array([
    [1 / 3, 1 / 3],
    [_b1, _b1], [_a1, _b1], [_b1, _a1],
    [_b2, _b2], [_a2, _b2], [_b2, _a2],
])
QUAD_WEIGHTS = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)

GAUSS_3 = (np.array([-np.sqrt(3 / 5), 0.0, np.sqrt(3 / 5)]), np.array([5 / 9, 8 / 9, 5 / 9]))


def barycentric(ref):
    ref = np.atleast_2d(ref)
    return np.stack([1 - ref[:, 0] - ref[:, 1], ref[:, 0], ref[:, 1]], axis=1)


def p2_shape(lam):
    """P2 basis values at barycentric points ``lam`` (nq, 3) -> (nq, 6)."""
    l0, l1, l2 = lam[:, 0], lam[:, 1], lam[:, 2]
    return np.stack([
        l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
        4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
    ], axis=1)


def p2_dshape(lam):
    """Derivatives of the P2 basis w.r.t. (lambda0, lambda1, lambda2): (nq, 6, 3)."""
    nq = len(lam)
    d = np.zeros((nq, 6, 3))
    for i in range(3):
        d[:, i, i] = 4 * lam[:, i] - 1
    for m, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        d[:, 3 + m, i] = 4 * lam[:, j]
        d[:, 3 + m, j] = 4 * lam[:, i]
    return d


class TaylorHood:
    """Degree-of-freedom layout and geometric factors for a mesh.

    Velocity unknowns are ordered [ux(0..N2), uy(0..N2)], pressure unknowns
    are the mesh vertices.
    """

    def __init__(self, mesh, quad=(QUAD_POINTS, QUAD_WEIGHTS)):
        self.mesh = mesh
        V = mesh.vertices
        T = mesh.triangles
        nv = len(V)
        local_edges = T[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 3, 2)
        e_sorted = np.sort(local_edges.reshape(-1, 2), axis=1)
        edges, inv = np.unique(e_sorted, axis=0, return_inverse=True)
        self.edges = edges
        self.n_p1 = nv
        self.n_p2 = nv + len(edges)
        self.cells = np.hstack([T, nv + inv.reshape(-1, 3)])
        self.nodes = np.vstack([V, 0.5 * (V[edges[:, 0]] + V[edges[:, 1]])])

        p = V[T]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)  # (nt, 2, 2) columns
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        self.area = 0.5 * det
        Jinv = np.empty_like(J)
        Jinv[:, 0, 0] = J[:, 1, 1] / det
        Jinv[:, 1, 1] = J[:, 0, 0] / det
        Jinv[:, 0, 1] = -J[:, 0, 1] / det
        Jinv[:, 1, 0] = -J[:, 1, 0] / det
        # gradients of barycentric coordinates, (nt, 3, 2)
        gref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        self.grad_lam = np.einsum("rk,tkx->trx", gref, Jinv)

        self.set_quadrature(*quad)

        # boundary nodes with tags
        bnd = mesh.boundary_edges
        key = {tuple(e): j for j, e in enumerate(edges)}
        bmid = np.array([nv + key[tuple(sorted(e))] for e in bnd], dtype=int)
        self.boundary_nodes = np.unique(np.concatenate([bnd.ravel(), bmid]))
        self.boundary_edge_mid = bmid
        self.node_tag = np.full(self.n_p2, -2)
        for (a, b), m, tag in zip(bnd, bmid, mesh.boundary_tags):
            for n in (a, b, m):
                # corners shared by a wall and a cut count as wall
                if self.node_tag[n] == -2 or tag == WALL:
                    self.node_tag[n] = tag
        self._tree = None

    def set_quadrature(self, ref, weights):
        lam = barycentric(ref)
        self.q_lam = lam
        self.q_w = np.asarray(weights)
        self.phi = p2_shape(lam)  # (nq, 6)
        dphi = p2_dshape(lam)  # (nq, 6, 3)
        self.dphi = np.einsum("qir,trx->tqix", dphi, self.grad_lam)  # (nt, nq, 6, 2)
        self.psi = lam  # P1 basis values (nq, 3)
        self.wdet = self.area[:, None] * self.q_w[None, :]  # (nt, nq)
        p = self.mesh.vertices[self.mesh.triangles]
        self.q_points = np.einsum("qr,trx->tqx", lam, p)

    @property
    def n_velocity(self):
        return 2 * self.n_p2

    @property
    def n_dofs(self):
        return 2 * self.n_p2 + self.n_p1

    def split(self, x):
        n = self.n_p2
        return x[:n], x[n:2 * n], x[2 * n:2 * n + self.n_p1]

    # -- evaluation at quadrature points ----------------------------------

    def values(self, ux, uy, mask=None):
        c = self.cells if mask is None else self.cells[mask]
        return np.stack([ux[c] @ self.phi.T, uy[c] @ self.phi.T], axis=-1)  # (nt, nq, 2)

    def gradients(self, ux, uy, mask=None):
        """Velocity gradient G[t, q, i, j] = d u_i / d x_j."""
        c = self.cells if mask is None else self.cells[mask]
        d = self.dphi if mask is None else self.dphi[mask]
        gx = np.einsum("ti,tqix->tqx", ux[c], d)
        gy = np.einsum("ti,tqix->tqx", uy[c], d)
        return np.stack([gx, gy], axis=2)

    def pressure_values(self, p, mask=None):
        T = self.mesh.triangles if mask is None else self.mesh.triangles[mask]
        return p[T] @ self.psi.T

    def integrate(self, f, mask=None):
        """Integral of a quadrature-point field f (nt, nq)."""
        w = self.wdet if mask is None else self.wdet[mask]
        return float(np.sum(w * f))

    def interpolate(self, func):
        """Nodal P2 interpolant of a vector function func(points) -> (n, 2)."""
        vals = np.asarray(func(self.nodes))
        return vals[:, 0].copy(), vals[:, 1].copy()

    # -- sparse matrices ----------------------------------------------------

    def p1_mass(self):
        T = self.mesh.triangles
        M = np.einsum("q,qi,qj->ij", self.q_w, self.psi, self.psi)
        data = self.area[:, None, None] * M[None]
        rows = np.repeat(T, 3, axis=1).ravel()
        cols = np.tile(T, (1, 3)).ravel()
        return sp.csr_matrix((data.ravel(), (rows, cols)), shape=(self.n_p1, self.n_p1))

    def p1_mean_vector(self):
        """Row vector m with m @ p = integral of p."""
        m = np.zeros(self.n_p1)
        np.add.at(m, self.mesh.triangles.ravel(), np.repeat(self.area / 3.0, 3))
        return m

    def divergence_matrix(self):
        """B[j, dof] = -integral of psi_j div(phi_dof) (velocity dofs [ux, uy])."""
        T = self.mesh.triangles
        n = self.n_p2
        blocks = []
        for comp in range(2):
            loc = -np.einsum("tq,qj,tqi->tji", self.wdet, self.psi, self.dphi[..., comp])
            rows = np.repeat(T, 6, axis=1).ravel()
            cols = np.tile(self.cells + comp * n, (1, 3)).ravel()
            blocks.append(sp.coo_matrix((loc.ravel(), (rows, cols)), shape=(self.n_p1, 2 * n)))
        return (blocks[0] + blocks[1]).tocsr()

    def vector_laplacian(self):
        """Stiffness matrix of integral grad u : grad v on [ux, uy]."""
        K = np.einsum("tq,tqix,tqjx->tij", self.wdet, self.dphi, self.dphi)
        n = self.n_p2
        rows = np.repeat(self.cells, 6, axis=1).ravel()
        cols = np.tile(self.cells, (1, 6)).ravel()
        A = sp.csr_matrix((K.ravel(), (rows, cols)), shape=(n, n))
        return sp.block_diag([A, A], format="csr")

    def velocity_mass(self):
        M = np.einsum("tq,qi,qj->tij", self.wdet, self.phi, self.phi)
        n = self.n_p2
        rows = np.repeat(self.cells, 6, axis=1).ravel()
        cols = np.tile(self.cells, (1, 6)).ravel()
        A = sp.csr_matrix((M.ravel(), (rows, cols)), shape=(n, n))
        return sp.block_diag([A, A], format="csr")

    # -- point evaluation ---------------------------------------------------

    def locate(self, pts, tol=1e-10):
        """Triangle index and barycentric coordinates for each point (-1 if outside)."""
        pts = np.atleast_2d(pts)
        V = self.mesh.vertices
        T = self.mesh.triangles
        if self._tree is None:
            self._tree = cKDTree(V[T].mean(axis=1))
        k = min(12, len(T))
        _, cand = self._tree.query(pts, k=k)
        cand = np.atleast_2d(cand)
        if cand.shape[0] != len(pts):
            cand = cand.T
        tri = np.full(len(pts), -1)
        lam_out = np.zeros((len(pts), 3))
        best = np.full(len(pts), -np.inf)
        for j in range(cand.shape[1]):
            c = cand[:, j]
            d = pts - V[T[c, 0]]
            lam12 = np.einsum("nx,nrx->nr", d, self.grad_lam[c, 1:, :])
            lam = np.column_stack([1 - lam12.sum(axis=1), lam12])
            score = lam.min(axis=1)
            better = score > best
            tri[better] = c[better]
            lam_out[better] = lam[better]
            best[better] = score[better]
        tri[best < -tol] = -1
        return tri, lam_out

    def evaluate(self, ux, uy, pts, with_gradient=False):
        """Evaluate a P2 vector field at arbitrary points (zero outside the mesh)."""
        tri, lam = self.locate(pts)
        inside = tri >= 0
        val = np.zeros((len(lam), 2))
        c = self.cells[tri[inside]]
        phi = p2_shape(lam[inside])
        val[inside, 0] = np.sum(ux[c] * phi, axis=1)
        val[inside, 1] = np.sum(uy[c] * phi, axis=1)
        if not with_gradient:
            return val
        grad = np.zeros((len(lam), 2, 2))
        d = np.einsum("nir,nrx->nix", p2_dshape(lam[inside]), self.grad_lam[tri[inside]])
        grad[inside, 0] = np.einsum("ni,nix->nx", ux[c], d)
        grad[inside, 1] = np.einsum("ni,nix->nx", uy[c], d)
        return val, grad

    # -- sections -------------------------------------------------------------

    def section_edges(self, section, tol=1e-9):
        """Mesh edges lying on a cross-section segment; raises if they do not cover it."""
        a, b = section.right, section.left
        L = np.linalg.norm(b - a)
        u = (b - a) / L
        nrm = np.array([-u[1], u[0]])
        V = self.mesh.vertices
        off = np.abs((V - a) @ nrm)
        along = (V - a) @ u
        on = (off < tol * max(1.0, L)) & (along > -tol) & (along < L + tol)
        cand = on[self.edges[:, 0]] & on[self.edges[:, 1]]
        idx = np.flatnonzero(cand)
        covered = np.sum(np.linalg.norm(V[self.edges[idx, 0]] - V[self.edges[idx, 1]], axis=1))
        if abs(covered - L) > 1e-8 * max(1.0, L):
            raise SectionNotAligned(
                f"section of outlet {section.outlet} at t={section.t} is not a union of mesh edges"
            )
        return idx

    def section_flux(self, ux, uy, section):
        """Exact flux of a P2 field through a snapped section (Simpson per edge)."""
        idx = self.section_edges(section)
        n = section.normal
        nv = self.n_p1
        e = self.edges[idx]
        L = np.linalg.norm(self.mesh.vertices[e[:, 0]] - self.mesh.vertices[e[:, 1]], axis=1)
        mid = nv + idx
        f0 = ux[e[:, 0]] * n[0] + uy[e[:, 0]] * n[1]
        f1 = ux[e[:, 1]] * n[0] + uy[e[:, 1]] * n[1]
        fm = ux[mid] * n[0] + uy[mid] * n[1]
        return float(np.sum(L / 6.0 * (f0 + 4 * fm + f1)))
