"""Element partitioning over the face-adjacency dual graph.

The partitioner is a deterministic greedy region grower: regions are seeded
at unassigned elements of minimum unassigned-degree and grown breadth-first
(lowest element index first within a level) until the region reaches its
quota ceil(remaining / remaining_ranks). When a region exhausts a connected
component early it re-seeds and keeps growing, so disconnected meshes still
yield size-balanced, never-empty parts.
"""

import logging

import numpy as np

from .errors import ConfigError

log = logging.getLogger("pfem.partition")


class DualGraph:
    """Symmetric element adjacency (shared faces) in CSR form."""

    def __init__(self, n, indptr, indices):
        self.n = n
        self.indptr = indptr
        self.indices = indices

    def neighbors(self, e):
        return self.indices[self.indptr[e]:self.indptr[e + 1]]

    def degree(self):
        return np.diff(self.indptr)


def build_dual_graph(mesh):
    """Adjacency between cells sharing a full face ((dim-1)-subsimplex)."""
    faces = mesh.cell_faces()                            # cell-major
    d1 = mesh.dim + 1
    cell_of_face = np.repeat(np.arange(mesh.n_cells, dtype=np.int64), d1)
    uniq, inverse, counts = np.unique(faces, axis=0, return_inverse=True, return_counts=True)
    if (counts > 2).any():
        raise ConfigError("a face is shared by more than two cells")
    order = np.argsort(inverse, kind="stable")
    shared = counts == 2
    # for each shared face, the two incident cells in file order
    starts = np.cumsum(counts) - counts
    a = cell_of_face[order[starts[shared]]]
    b = cell_of_face[order[starts[shared] + 1]]
    src = np.concatenate([a, b])
    dst = np.concatenate([b, a])
    perm = np.lexsort((dst, src))
    src, dst = src[perm], dst[perm]
    indptr = np.zeros(mesh.n_cells + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)
    return DualGraph(mesh.n_cells, indptr, dst)


class Partition:
    """Disjoint ownership of elements plus optional halo layers.

    owner  (n_cells,) owning rank per element
    owned  per-rank sorted arrays of owned elements
    local  per-rank sorted arrays of owned + halo elements
    halo   local minus owned
    """

    def __init__(self, owner, n_ranks):
        self.owner = np.asarray(owner, dtype=np.int64)
        self.n_ranks = n_ranks
        self.halo_layers = 0
        self.owned = [np.flatnonzero(self.owner == r) for r in range(n_ranks)]
        self.local = [o.copy() for o in self.owned]
        self.halo = [np.empty(0, dtype=np.int64) for _ in range(n_ranks)]


def partition_greedy(graph, n_ranks, seed=0):
    """Greedy graph-growing partition into n_ranks parts.

    Deterministic given (graph, n_ranks, seed): the seed only picks among
    tied minimum-degree candidates when a region starts; BFS growth always
    absorbs the lowest element index first.
    """
    n = graph.n
    if n_ranks < 1 or n_ranks > n:
        raise ConfigError(f"cannot split {n} elements into {n_ranks} parts")
    rng = np.random.default_rng(seed)
    owner = np.full(n, -1, dtype=np.int64)
    # degree counting only unassigned neighbors, maintained incrementally
    udeg = graph.degree().astype(np.int64)
    remaining = n

    def pick_seed():
        unassigned = np.flatnonzero(owner < 0)
        deg = udeg[unassigned]
        ties = unassigned[deg == deg.min()]
        if len(ties) == 1:
            return int(ties[0])
        return int(ties[rng.integers(len(ties))])

    for rank in range(n_ranks):
        quota = -(-remaining // (n_ranks - rank))        # ceil division
        grown = 0
        frontier = [pick_seed()]
        while grown < quota:
            if not frontier:
                frontier = [pick_seed()]
            nxt = set()
            for e in sorted(frontier):
                if owner[e] >= 0:
                    continue
                owner[e] = rank
                udeg[graph.neighbors(e)] -= 1
                grown += 1
                for nb in graph.neighbors(e):
                    if owner[nb] < 0:
                        nxt.add(int(nb))
                if grown == quota:
                    break
            frontier = [e for e in nxt if owner[e] < 0]
        remaining -= grown

    return Partition(owner, n_ranks)


def add_halo(partition, graph, layers=1):
    """Extend each rank's local element set by BFS layers over the dual graph."""
    if layers < 0:
        raise ConfigError("halo layer count must be >= 0")
    for r in range(partition.n_ranks):
        current = partition.owned[r]
        members = np.zeros(graph.n, dtype=bool)
        members[current] = True
        frontier = current
        for _ in range(layers):
            if frontier.size == 0:
                break
            nbrs = np.concatenate([graph.neighbors(e) for e in frontier]) \
                if frontier.size else np.empty(0, dtype=np.int64)
            nbrs = np.unique(nbrs)
            new = nbrs[~members[nbrs]]
            members[new] = True
            frontier = new
        partition.local[r] = np.flatnonzero(members)
        own = np.zeros(graph.n, dtype=bool)
        own[partition.owned[r]] = True
        partition.halo[r] = np.flatnonzero(members & ~own)
    partition.halo_layers = layers
    return partition


def restrict_mesh(mesh, partition, rank):
    """Extract rank's local submesh with compact numbering.

    Returns (submesh, cell_map, vertex_map) where cell_map/vertex_map send
    local indices back to global ones. Coordinates are copied bitwise.
    Global boundary faces of local cells keep their markers; partition
    interfaces are not boundary.
    """
    from .mesh import Mesh, _face_keys

    local = partition.local[rank]
    cells = mesh.cells[local]
    vertex_map = np.unique(cells.ravel())
    lookup = np.full(mesh.n_vertices, -1, dtype=np.int64)
    lookup[vertex_map] = np.arange(len(vertex_map))
    local_cells = lookup[cells]

    faces, markers = np.empty((0, mesh.dim), dtype=np.int64), np.empty(0, dtype=np.int64)
    if len(mesh.boundary_faces):
        # owning cell of each global boundary face
        all_faces = mesh.cell_faces()
        keys = _face_keys(all_faces, mesh.n_vertices)
        order = np.argsort(keys, kind="stable")
        bkeys = _face_keys(mesh.boundary_faces, mesh.n_vertices)
        pos = np.searchsorted(keys[order], bkeys)
        face_cell = order[pos] // (mesh.dim + 1)
        in_local = np.zeros(mesh.n_cells, dtype=bool)
        in_local[local] = True
        keep = in_local[face_cell]
        faces = lookup[mesh.boundary_faces[keep]]
        faces = np.sort(faces, axis=1)
        markers = mesh.boundary_markers[keep]

    sub = Mesh(mesh.vertices[vertex_map], local_cells, faces, markers)
    return sub, local.copy(), vertex_map
