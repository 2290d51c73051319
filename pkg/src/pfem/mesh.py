"""Simplicial meshes: structured box generation and Gmsh import.

Conventions
-----------
* Cells are triangles (dim 2) or tetrahedra (dim 3) stored with strictly
  positive signed volume under the stored vertex ordering.
* Boundary faces are stored with ascending vertex ids; orientation is never
  needed downstream (markers, traces and facet areas are orientation-free).
* Box vertices are numbered lexicographically with x fastest, so the vertex
  count is prod(n_k + 1) and numbering is independent of any partitioning.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MeshParseError

log = logging.getLogger("pfem.mesh")

# Kuhn split of the unit cube into 6 positively oriented tetrahedra, all
# sharing the main diagonal (corner 0 to corner 7). Corner ids are binary
# (i, j, k) -> i + 2j + 4k. The orderings are adjusted so every tet has
# positive signed volume for axis-aligned boxes with increasing bounds.
KUHN_TETS = (
    (0, 1, 3, 7),
    (0, 1, 7, 5),
    (0, 2, 7, 3),
    (0, 2, 6, 7),
    (0, 4, 5, 7),
    (0, 4, 7, 6),
)

# Each quad cell (corners 00, 10, 01, 11) splits along the 00-11 diagonal.
QUAD_TRIS = ((0, 1, 3), (0, 3, 2))

# Local faces of a cell, opposite each vertex.
TET_FACES = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))
TRI_EDGES = ((1, 2), (0, 2), (0, 1))


class Mesh:
    """A simplicial mesh with marked boundary faces.

    vertices : (n_v, dim) float64
    cells    : (n_c, dim + 1) int64, positively oriented
    boundary_faces : (n_bf, dim) int64, each row sorted ascending
    boundary_markers : (n_bf,) int64, 0 means "unmarked"
    """

    def __init__(self, vertices, cells, boundary_faces, boundary_markers):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        self.boundary_faces = np.ascontiguousarray(boundary_faces, dtype=np.int64)
        self.boundary_markers = np.ascontiguousarray(boundary_markers, dtype=np.int64)

    @property
    def dim(self):
        return self.vertices.shape[1]

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_cells(self):
        return self.cells.shape[0]

    def cell_faces(self):
        """All (cell, local face) vertex tuples, rows sorted ascending.

        Returns an (n_c * (dim+1), dim) array ordered cell-major.
        """
        local = TET_FACES if self.dim == 3 else TRI_EDGES
        faces = self.cells[:, np.array(local)]          # (n_c, d+1, d)
        faces = faces.reshape(-1, self.dim)
        return np.sort(faces, axis=1)

    def validate(self):
        """Raise ConfigError if a mesh invariant is violated."""
        d = self.dim
        if self.cells.shape[1] != d + 1:
            raise ConfigError("cell arity does not match mesh dimension")
        if self.cells.size and (self.cells.min() < 0 or self.cells.max() >= self.n_vertices):
            raise ConfigError("cell references a vertex that does not exist")
        if not np.isfinite(self.vertices).all():
            raise ConfigError("non-finite vertex coordinates")
        vol = signed_cell_volumes(self)
        if (vol <= 0.0).any():
            bad = int(np.argmax(vol <= 0.0))
            raise ConfigError(f"cell {bad} has non-positive signed volume {vol[bad]:g}")
        if self.boundary_faces.shape[0] != self.boundary_markers.shape[0]:
            raise ConfigError("boundary face/marker length mismatch")
        if self.boundary_faces.size:
            all_faces = self.cell_faces()
            uniq, counts = np.unique(all_faces, axis=0, return_counts=True)
            # every stored boundary face must appear as the face of exactly one cell
            order = np.lexsort(uniq.T[::-1])
            uniq, counts = uniq[order], counts[order]
            keys = _face_keys(uniq, self.n_vertices)
            bkeys = _face_keys(np.sort(self.boundary_faces, axis=1), self.n_vertices)
            pos = np.searchsorted(keys, bkeys)
            ok = (pos < len(keys))
            ok &= keys[np.minimum(pos, len(keys) - 1)] == bkeys
            if not ok.all():
                raise ConfigError("boundary face is not a face of any cell")
            if (counts[pos] != 1).any():
                raise ConfigError("boundary face is shared by two cells (interior face)")
        return self


def _face_keys(faces, n_vertices):
    """Pack sorted face rows into one comparable int64 key per face."""
    key = np.zeros(len(faces), dtype=np.int64)
    for c in range(faces.shape[1]):
        key = key * n_vertices + faces[:, c]
    return key


def signed_cell_volumes(mesh):
    """Signed volume of every cell under its stored vertex ordering."""
    v = mesh.vertices[mesh.cells]                        # (n_c, d+1, dim)
    edges = v[:, 1:, :] - v[:, :1, :]                    # (n_c, d, dim)
    det = np.linalg.det(edges)
    return det / _factorial(mesh.dim)


def cell_volume(mesh):
    """Unsigned per-cell volumes (areas in 2D)."""
    return np.abs(signed_cell_volumes(mesh))


def _factorial(d):
    return float(math.factorial(d))


# ===================== structured box generation =====================

@dataclass
class BoxSpec:
    """Axis-aligned box [a1,b1] x ... with n_k subdivisions per axis.

    face_markers orders the box sides (x=a1, x=b1, y=a2, y=b2, z=a3, z=b3);
    the default is 1..2*dim in that order.
    """
    bounds: tuple
    subdivisions: tuple
    face_markers: tuple = field(default=None)

    def __post_init__(self):
        dim = len(self.subdivisions)
        if dim not in (2, 3) or len(self.bounds) != dim:
            raise ConfigError("box must be 2D or 3D with matching bounds/subdivisions")
        for (a, b), n in zip(self.bounds, self.subdivisions):
            if not (b > a):
                raise ConfigError(f"degenerate box extent [{a}, {b}]")
            if int(n) < 1:
                raise ConfigError("subdivision counts must be >= 1")
        if self.face_markers is None:
            self.face_markers = tuple(range(1, 2 * dim + 1))
        if len(self.face_markers) != 2 * dim:
            raise ConfigError("need one face marker per box side")


def generate_box(spec):
    """Triangulate a box: 2 triangles per quad in 2D, 6 Kuhn tets per cube in 3D.

    Numbering is fully deterministic: vertices lexicographic (x fastest),
    cells cube-major in the same order with a fixed split template.
    """
    dim = len(spec.subdivisions)
    n = [int(k) for k in spec.subdivisions]
    axes = [np.linspace(a, b, k + 1) for (a, b), k in zip(spec.bounds, n)]
    grids = np.meshgrid(*axes, indexing="ij")
    vertices = np.stack([g.ravel(order="F") for g in grids], axis=1)

    # vertex id of grid point (i, j[, k]), x fastest
    strides = np.cumprod([1] + [k + 1 for k in n[:-1]])

    cell_axes = [np.arange(k) for k in n]
    cgrids = np.meshgrid(*cell_axes, indexing="ij")
    base = sum(s * g.ravel(order="F") for s, g in zip(strides, cgrids))

    if dim == 2:
        corner = np.array([0, 1, strides[1], 1 + strides[1]])  # 00, 10, 01, 11
        template = np.array(QUAD_TRIS)
    else:
        offs = {}
        for di, dj, dk in itertools.product((0, 1), repeat=3):
            offs[di + 2 * dj + 4 * dk] = di + dj * strides[1] + dk * strides[2]
        corner = np.array([offs[b] for b in range(8)])
        template = np.array(KUHN_TETS)

    corners = base[:, None] + corner[None, :]            # (n_cubes, 2^dim)
    cells = corners[:, template]                         # (n_cubes, n_split, d+1)
    cells = cells.reshape(-1, dim + 1).astype(np.int64)

    mesh = Mesh(vertices, cells, np.empty((0, dim), dtype=np.int64), np.empty(0, dtype=np.int64))
    faces, markers = _box_boundary(mesh, spec)
    mesh.boundary_faces = faces
    mesh.boundary_markers = markers
    return mesh.validate()


def _box_boundary(mesh, spec):
    """Extract once-occurring cell faces and mark them by box side."""
    all_faces = mesh.cell_faces()
    uniq, counts = np.unique(all_faces, axis=0, return_counts=True)
    bfaces = uniq[counts == 1]
    coords = mesh.vertices[bfaces]                       # (n_bf, d, dim)
    markers = np.zeros(len(bfaces), dtype=np.int64)
    for axis in range(mesh.dim):
        lo, hi = spec.bounds[axis]
        on_lo = (coords[:, :, axis] == lo).all(axis=1)
        on_hi = (coords[:, :, axis] == hi).all(axis=1)
        markers[on_lo] = spec.face_markers[2 * axis]
        markers[on_hi] = spec.face_markers[2 * axis + 1]
    if (markers == 0).any():
        raise ConfigError("box boundary face not on any side plane")
    return bfaces, markers


# ===================== Gmsh MSH 2.2 import =====================

# element type -> (node count, topological dimension)
_GMSH_TYPES = {1: (2, 1), 2: (3, 2), 4: (4, 3)}


def read_gmsh(path):
    """Read an ASCII Gmsh MSH 2.2 file.

    Element types 2/4 of top dimension become cells; codimension-one types
    (lines under triangles, triangles under tets) become boundary faces with
    the first physical tag as marker (0 when untagged). Node ids are remapped
    to dense 0-based indices in ascending original order. Faces that are not
    faces of exactly one cell are dropped with a warning, and cells with
    negative volume are repaired by swapping two vertices.
    """
    with open(path) as f:
        lines = f.read().splitlines()

    nodes = {}
    elements = []                                        # (etype, marker, node ids, line no)
    i = 0
    n_lines = len(lines)
    fmt_seen = False
    while i < n_lines:
        tok = lines[i].strip()
        if tok == "$MeshFormat":
            parts = lines[i + 1].split()
            if not parts or not parts[0].startswith("2."):
                raise MeshParseError(f"unsupported MSH version {parts[0] if parts else '?'}", i + 2)
            fmt_seen = True
            i += 3
        elif tok == "$Nodes":
            try:
                count = int(lines[i + 1])
            except (ValueError, IndexError):
                raise MeshParseError("bad node count", i + 2)
            for k in range(count):
                ln = i + 2 + k
                parts = lines[ln].split()
                if len(parts) != 4:
                    raise MeshParseError("node line must be 'id x y z'", ln + 1)
                nodes[int(parts[0])] = [float(p) for p in parts[1:]]
            if lines[i + 2 + count].strip() != "$EndNodes":
                raise MeshParseError("missing $EndNodes", i + 3 + count)
            i += 3 + count
        elif tok == "$Elements":
            try:
                count = int(lines[i + 1])
            except (ValueError, IndexError):
                raise MeshParseError("bad element count", i + 2)
            for k in range(count):
                ln = i + 2 + k
                parts = [int(p) for p in lines[ln].split()]
                if len(parts) < 3:
                    raise MeshParseError("element line too short", ln + 1)
                etype, ntags = parts[1], parts[2]
                if etype not in _GMSH_TYPES:
                    continue
                n_nodes, _ = _GMSH_TYPES[etype]
                conn = parts[3 + ntags:]
                if len(conn) != n_nodes:
                    raise MeshParseError(
                        f"element type {etype} expects {n_nodes} nodes, got {len(conn)}", ln + 1)
                marker = parts[3] if ntags >= 1 else 0
                elements.append((etype, marker, conn, ln + 1))
            if lines[i + 2 + count].strip() != "$EndElements":
                raise MeshParseError("missing $EndElements", i + 3 + count)
            i += 3 + count
        else:
            i += 1
    if not fmt_seen:
        raise MeshParseError("no $MeshFormat section", 1)
    if not nodes:
        raise MeshParseError("no $Nodes section", 1)

    ids = sorted(nodes)
    remap = {orig: new for new, orig in enumerate(ids)}
    coords = np.array([nodes[orig] for orig in ids], dtype=np.float64)

    dim = 3 if any(e[0] == 4 for e in elements) else 2
    cell_type = 4 if dim == 3 else 2
    face_type = 2 if dim == 3 else 1
    if dim == 2:
        coords = coords[:, :2]

    def remap_conn(conn, ln):
        out = []
        for nid in conn:
            if nid not in remap:
                raise MeshParseError(f"element references unknown node {nid}", ln)
            out.append(remap[nid])
        return out

    cells, faces, markers = [], [], []
    for etype, marker, conn, ln in elements:
        if etype == cell_type:
            cells.append(remap_conn(conn, ln))
        elif etype == face_type:
            faces.append(sorted(remap_conn(conn, ln)))
            markers.append(marker)
    if not cells:
        raise MeshParseError("file contains no cells", 1)

    cells = np.array(cells, dtype=np.int64)
    mesh = Mesh(coords, cells,
                np.array(faces, dtype=np.int64).reshape(len(faces), dim),
                np.array(markers, dtype=np.int64))

    vol = signed_cell_volumes(mesh)
    flipped = vol < 0
    if flipped.any():
        log.warning("read_gmsh: repaired %d negatively oriented cells", int(flipped.sum()))
        mesh.cells[flipped] = mesh.cells[flipped][:, [0, 2, 1] + ([3] if dim == 3 else [])]
    if (signed_cell_volumes(mesh) == 0.0).any():
        raise MeshParseError("degenerate (zero volume) cell in file", 1)

    if len(mesh.boundary_faces):
        all_faces = mesh.cell_faces()
        uniq, counts = np.unique(all_faces, axis=0, return_counts=True)
        once = uniq[counts == 1]
        keys = np.sort(_face_keys(once, mesh.n_vertices))
        bkeys = _face_keys(mesh.boundary_faces, mesh.n_vertices)
        pos = np.searchsorted(keys, bkeys)
        keep = (pos < len(keys))
        keep &= keys[np.minimum(pos, len(keys) - 1)] == bkeys
        # a face listed twice in the file keeps its first occurrence
        _, first = np.unique(bkeys, return_index=True)
        dup_mask = np.zeros(len(bkeys), dtype=bool)
        dup_mask[first] = True
        keep &= dup_mask
        if not keep.all():
            log.warning("read_gmsh: dropped %d non-boundary or duplicate faces",
                        int((~keep).sum()))
        mesh.boundary_faces = mesh.boundary_faces[keep]
        mesh.boundary_markers = mesh.boundary_markers[keep]

    return mesh.validate()


def write_gmsh(mesh, path):
    """Debug writer: emit the mesh back as ASCII MSH 2.2."""
    dim = mesh.dim
    cell_type = 4 if dim == 3 else 2
    face_type = 2 if dim == 3 else 1
    with open(path, "w") as f:
        f.write("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n")
        f.write(f"$Nodes\n{mesh.n_vertices}\n")
        for i, p in enumerate(mesh.vertices):
            x, y = p[0], p[1]
            z = p[2] if dim == 3 else 0.0
            f.write(f"{i + 1} {x:.17g} {y:.17g} {z:.17g}\n")
        f.write("$EndNodes\n")
        n_el = mesh.n_cells + len(mesh.boundary_faces)
        f.write(f"$Elements\n{n_el}\n")
        eid = 1
        for face, marker in zip(mesh.boundary_faces, mesh.boundary_markers):
            conn = " ".join(str(v + 1) for v in face)
            f.write(f"{eid} {face_type} 2 {marker} {marker} {conn}\n")
            eid += 1
        for cell in mesh.cells:
            conn = " ".join(str(v + 1) for v in cell)
            f.write(f"{eid} {cell_type} 2 0 0 {conn}\n")
            eid += 1
        f.write("$EndElements\n")
