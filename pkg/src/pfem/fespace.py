"""Lagrange P1/P2 spaces on simplices: reference bases, tabulated symmetric
Gauss quadrature, and distributed DoF maps.

Global DoF numbering is independent of the partitioning: vertex DoFs first
(vertex ids), then for P2 one DoF per mesh edge, edges ordered by their
sorted vertex pair lexicographically. Serial and partitioned runs therefore
number every DoF identically.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UnsupportedDegreeError

# Local edges of a simplex (pairs of local vertices), lexicographic.
TRI_LOCAL_EDGES = ((0, 1), (0, 2), (1, 2))
TET_LOCAL_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


class LagrangeElement:
    """Scalar Lagrange element of degree 1 or 2 on the reference simplex.

    Local DoF order: the d+1 vertices, then (degree 2) one midpoint per
    local edge in lexicographic local-edge order.
    """

    def __init__(self, dim, degree):
        if dim not in (1, 2, 3):
            raise ConfigError("elements are defined for dim 1, 2 and 3")
        if degree not in (1, 2):
            raise UnsupportedDegreeError(f"unsupported polynomial degree {degree}")
        self.dim = dim
        self.degree = degree
        self.local_edges = {1: ((0, 1),), 2: TRI_LOCAL_EDGES, 3: TET_LOCAL_EDGES}[dim]
        self.n_dofs = dim + 1 if degree == 1 else dim + 1 + len(self.local_edges)

    def nodal_points(self):
        """Reference coordinates of the local DoFs."""
        d = self.dim
        verts = np.vstack([np.zeros(d), np.eye(d)])
        if self.degree == 1:
            return verts
        mids = np.array([(verts[i] + verts[j]) / 2.0 for i, j in self.local_edges])
        return np.vstack([verts, mids])

    def tabulate(self, points):
        """Basis values and reference gradients at an (nq, dim) point array.

        Returns (values (nq, n_dofs), grads (nq, n_dofs, dim)).
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        nq, d = pts.shape
        lam = np.empty((nq, d + 1))
        lam[:, 0] = 1.0 - pts.sum(axis=1)
        lam[:, 1:] = pts
        dlam = np.empty((d + 1, d))
        dlam[0] = -1.0
        dlam[1:] = np.eye(d)

        if self.degree == 1:
            vals = lam
            grads = np.broadcast_to(dlam, (nq, d + 1, d)).copy()
            return vals, grads

        n = self.n_dofs
        vals = np.empty((nq, n))
        grads = np.empty((nq, n, d))
        vals[:, :d + 1] = lam * (2.0 * lam - 1.0)
        grads[:, :d + 1, :] = (4.0 * lam - 1.0)[:, :, None] * dlam[None, :, :]
        for k, (i, j) in enumerate(self.local_edges):
            c = d + 1 + k
            vals[:, c] = 4.0 * lam[:, i] * lam[:, j]
            grads[:, c, :] = 4.0 * (lam[:, j, None] * dlam[i] + lam[:, i, None] * dlam[j])
        return vals, grads


def eval_basis(element, point):
    """Basis values and reference gradients at one reference point."""
    vals, grads = element.tabulate(np.asarray(point, dtype=np.float64)[None, :])
    return vals[0], grads[0]


# ===================== quadrature =====================

@dataclass(frozen=True)
class QuadratureRule:
    """Points in reference coordinates, weights summing to the reference
    simplex measure 1/dim!, and the exact polynomial degree of the rule."""
    points: np.ndarray
    weights: np.ndarray
    exact_degree: int

    @property
    def n_points(self):
        return len(self.weights)


def _bary_orbit(vals):
    """Distinct permutations of a barycentric tuple, as reference coords."""
    from itertools import permutations
    seen, out = set(), []
    for p in permutations(vals):
        if p not in seen:
            seen.add(p)
            out.append(p[1:])
    return sorted(out)


def _rule(points, weights, deg):
    return QuadratureRule(np.array(points, dtype=np.float64),
                          np.array(weights, dtype=np.float64), deg)


def _build_volume_rules():
    s5, s10, s15 = math.sqrt(5.0), math.sqrt(10.0), math.sqrt(15.0)

    tri1 = _rule([(1 / 3, 1 / 3)], [0.5], 1)
    tri2 = _rule([(1 / 6, 1 / 6), (2 / 3, 1 / 6), (1 / 6, 2 / 3)], [1 / 6] * 3, 2)
    # two 3-orbits (a, a, 1-2a); parameters and weights in closed form
    a1 = (8.0 - s10 + math.sqrt(38.0 - 44.0 * math.sqrt(0.4))) / 18.0
    a2 = (8.0 - s10 - math.sqrt(38.0 - 44.0 * math.sqrt(0.4))) / 18.0
    w1 = (620.0 + math.sqrt(213125.0 - 53320.0 * s10)) / 7440.0
    w2 = (620.0 - math.sqrt(213125.0 - 53320.0 * s10)) / 7440.0
    pts = [(a1, a1), (1 - 2 * a1, a1), (a1, 1 - 2 * a1),
           (a2, a2), (1 - 2 * a2, a2), (a2, 1 - 2 * a2)]
    tri4 = _rule(pts, [w1] * 3 + [w2] * 3, 4)

    tet1 = _rule([(0.25, 0.25, 0.25)], [1 / 6], 1)
    a = (5.0 + 3.0 * s5) / 20.0
    b = (5.0 - s5) / 20.0
    tet2 = _rule(_bary_orbit((a, b, b, b)), [1 / 24] * 4, 2)
    # 15-point rule, exact through degree 5
    pts = [(0.25, 0.25, 0.25)]
    ws = [8.0 / 405.0]
    c1 = (7.0 - s15) / 34.0
    c2 = (7.0 + s15) / 34.0
    for p in _bary_orbit((c1, c1, c1, 1 - 3 * c1)):
        pts.append(p)
        ws.append((2665.0 + 14.0 * s15) / 226800.0)
    for p in _bary_orbit((c2, c2, c2, 1 - 3 * c2)):
        pts.append(p)
        ws.append((2665.0 - 14.0 * s15) / 226800.0)
    bb = (5.0 - s15) / 20.0
    cc = (5.0 + s15) / 20.0
    for p in _bary_orbit((bb, bb, cc, cc)):
        pts.append(p)
        ws.append(5.0 / 567.0)
    tet5 = _rule(pts, ws, 5)

    return {2: {1: tri1, 2: tri2, 4: tri4}, 3: {1: tet1, 2: tet2, 4: tet5}}


_VOLUME_RULES = _build_volume_rules()


def quadrature_for(dim, required_degree):
    """Smallest tabulated symmetric rule exact for the required degree.

    Tabulated degrees: 1, 2 and 4 (degree-3 requests return the degree-4
    rule; the 3D degree-4 rule is the 15-point rule, exact through 5).
    """
    if dim not in (2, 3):
        raise ConfigError("quadrature is tabulated for dim 2 and 3")
    deg = int(required_degree)
    if deg < 1 or deg > 4:
        raise UnsupportedDegreeError(f"no tabulated rule for degree {required_degree}")
    key = 1 if deg <= 1 else 2 if deg == 2 else 4
    return _VOLUME_RULES[dim][key]


def _gauss_legendre_unit(n):
    """n-point Gauss-Legendre rule on [0, 1]."""
    if n == 1:
        return [0.5], [1.0]
    if n == 2:
        d = 0.5 / math.sqrt(3.0)
        return [0.5 - d, 0.5 + d], [0.5, 0.5]
    d = 0.5 * math.sqrt(0.6)
    return [0.5 - d, 0.5, 0.5 + d], [5 / 18, 8 / 18, 5 / 18]


def facet_quadrature_for(dim, required_degree):
    """Rule on the reference facet of a dim-simplex (interval or triangle)."""
    if dim == 3:
        return quadrature_for(2, required_degree)
    if dim != 2:
        raise ConfigError("facet quadrature is tabulated for dim 2 and 3")
    deg = int(required_degree)
    if deg < 1 or deg > 5:
        raise UnsupportedDegreeError(f"no tabulated facet rule for degree {required_degree}")
    n = 1 if deg <= 1 else 2 if deg <= 3 else 3
    x, w = _gauss_legendre_unit(n)
    return QuadratureRule(np.array(x)[:, None], np.array(w), 2 * n - 1)


# ===================== DoF maps =====================

def _pack_pairs(pairs, n):
    return pairs[:, 0] * np.int64(n) + pairs[:, 1]


class DofMap:
    """Distribution of the global DoFs of one scalar space over ranks.

    unique_maps[r]   sorted global DoFs owned by rank r (disjoint cover)
    repeated_maps[r] sorted global DoFs touched by rank r's local elements
                     (owned ones plus any halo layer)
    cell_dofs        (n_cells, n_local) global DoFs of every cell; identical
                     for every rank count by construction
    """

    def __init__(self, mesh, partition, element):
        if element.dim != mesh.dim:
            raise ConfigError("element dimension does not match mesh")
        self.mesh = mesh
        self.partition = partition
        self.element = element
        self.n_ranks = partition.n_ranks

        cells = mesh.cells
        n_v = mesh.n_vertices
        if element.degree == 1:
            self.cell_dofs = cells.copy()
            self.n_global = n_v
            self.dof_points = mesh.vertices.copy()
            self.edge_vertices = None
            self._edge_keys = None
        else:
            pairs = cells[:, np.array(element.local_edges)]      # (n_c, n_le, 2)
            pairs = np.sort(pairs.reshape(-1, 2), axis=1)
            edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
            n_le = len(element.local_edges)
            edge_ids = inverse.reshape(len(cells), n_le)
            self.cell_dofs = np.hstack([cells, n_v + edge_ids]).astype(np.int64)
            self.n_global = n_v + len(edges)
            mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
            self.dof_points = np.vstack([mesh.vertices, mids])
            self.edge_vertices = edges
            self._edge_keys = _pack_pairs(edges, n_v)            # ascending by construction

        nloc = self.cell_dofs.shape[1]
        owner_of_cell = partition.owner
        # owner of a DoF: lowest rank owning an element that touches it
        dof_owner = np.full(self.n_global, self.n_ranks, dtype=np.int64)
        np.minimum.at(dof_owner, self.cell_dofs.ravel(), np.repeat(owner_of_cell, nloc))
        if (dof_owner == self.n_ranks).any():
            raise ConfigError("DoF not touched by any cell (isolated vertex?)")
        self.dof_owner = dof_owner

        self.unique_maps = [np.flatnonzero(dof_owner == r) for r in range(self.n_ranks)]
        self.repeated_maps = [np.unique(self.cell_dofs[partition.local[r]].ravel())
                              for r in range(self.n_ranks)]

        # support coverage: an owned DoF is covered when every element that
        # touches it is local to the owner (relevant to overlapped assembly)
        touch_total = np.bincount(self.cell_dofs.ravel(), minlength=self.n_global)
        touch_local = np.zeros(self.n_global, dtype=np.int64)
        for r in range(self.n_ranks):
            local_dofs = self.cell_dofs[partition.local[r]].ravel()
            counts = np.bincount(local_dofs, minlength=self.n_global)
            mine = dof_owner == r
            touch_local[mine] = counts[mine]
        self.support_covered = touch_local == touch_total

    def unique_map(self, rank):
        return self.unique_maps[rank]

    def repeated_map(self, rank):
        return self.repeated_maps[rank]

    @property
    def n_local(self):
        return self.cell_dofs.shape[1]

    def face_dof_rows(self, faces):
        """Per-face DoF rows in the nodal order of the face's trace element:
        the face vertices in stored order, then (P2) the midpoints of the
        face's own edges in local lexicographic order.

        faces: (n_f, dim) sorted vertex rows.
        """
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, self.mesh.dim)
        cols = [faces]
        if self.element.degree == 2:
            local = TRI_LOCAL_EDGES if self.mesh.dim == 3 else ((0, 1),)
            fpairs = np.sort(faces[:, np.array(local)].reshape(-1, 2), axis=1)
            keys = _pack_pairs(fpairs, self.mesh.n_vertices)
            pos = np.searchsorted(self._edge_keys, keys)
            if (pos >= len(self._edge_keys)).any() or (self._edge_keys[pos] != keys).any():
                raise ConfigError("face edge not found in mesh edge set")
            cols.append(self.mesh.n_vertices + pos.reshape(len(faces), len(local)))
        return np.hstack(cols)

    def face_dofs(self, faces):
        """Global DoFs with a nodal point on any of the given faces (sorted set)."""
        faces = np.asarray(faces, dtype=np.int64)
        if faces.size == 0:
            return np.empty(0, dtype=np.int64)
        return np.unique(self.face_dof_rows(faces))


def build_dofmap(mesh, partition, element):
    """Build the DofMap of a scalar Lagrange space over a partitioned mesh."""
    return DofMap(mesh, partition, element)


class BlockMap:
    """ncomp stacked copies of a scalar DofMap, component-major: the DoF of
    component c at scalar index i is c * n_scalar + i."""

    def __init__(self, base, ncomp):
        self.base = base
        self.ncomp = ncomp
        self.n_scalar = base.n_global
        self.n_global = ncomp * base.n_global
        self.n_ranks = base.n_ranks
        self.unique_maps = [self._stack(m) for m in base.unique_maps]
        self.repeated_maps = [self._stack(m) for m in base.repeated_maps]
        self.dof_owner = np.tile(base.dof_owner, ncomp)

    def _stack(self, idx):
        return np.concatenate([c * self.n_scalar + idx for c in range(self.ncomp)])

    def unique_map(self, rank):
        return self.unique_maps[rank]

    def repeated_map(self, rank):
        return self.repeated_maps[rank]

    def component_indices(self, c, idx):
        return c * self.n_scalar + np.asarray(idx, dtype=np.int64)
