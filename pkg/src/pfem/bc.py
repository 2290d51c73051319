"""Strong Dirichlet conditions by row replacement.

A constrained row i is replaced by c * u_i = c * g_i with c the magnitude
of the original diagonal entry (1.0 when that is numerically zero), which
keeps the row scaled like its neighbours. Optional symmetrization moves the
constrained columns to the right-hand side so a symmetric matrix stays
symmetric and CG remains applicable.
"""

import numpy as np

from .errors import ConfigError, PatternError

_TINY = 1e-300


class BCSet:
    """Ordered collection of (marker, value_fn) Dirichlet specifications."""

    def __init__(self):
        self.entries = []

    def add(self, marker, value):
        """Attach a boundary value (constant or fn of points (n, dim) -> (n,))
        to a boundary marker. Marker 0 is the unmarked default and cannot
        carry a condition."""
        marker = int(marker)
        if marker == 0:
            raise ConfigError("marker 0 means 'unmarked'; pick a positive marker")
        if not callable(value):
            const = float(value)
            value = lambda x, c=const: np.full(len(x), c)
        self.entries.append((marker, value))
        return self


def resolve_dirichlet(bcset, dofmap):
    """Constrained DoFs and their values.

    A DoF lying on faces with several conditioned markers takes the value
    of the lowest marker. Returns (dofs ascending, values aligned).
    """
    mesh = dofmap.mesh
    chosen = {}
    # descending marker order, so lower markers overwrite higher ones
    for marker, fn in sorted(bcset.entries, key=lambda e: -e[0]):
        faces = mesh.boundary_faces[mesh.boundary_markers == marker]
        if len(faces) == 0:
            raise ConfigError(f"no boundary faces carry marker {marker}")
        dofs = dofmap.face_dofs(faces)
        vals = np.asarray(fn(dofmap.dof_points[dofs]), dtype=np.float64)
        if vals.shape != (len(dofs),):
            raise ConfigError("boundary value function must return one value per point")
        for d, v in zip(dofs, vals):
            chosen[int(d)] = float(v)
    if not chosen:
        return np.empty(0, dtype=np.int64), np.empty(0)
    dofs = np.array(sorted(chosen), dtype=np.int64)
    return dofs, np.array([chosen[d] for d in dofs])


def apply_dirichlet(a, b, dofs, values, symmetrize=False):
    """Impose u[dofs] = values on a square DistMatrix and its rhs, in place.

    The operation is idempotent: re-applying the same constraints leaves
    the system unchanged.
    """
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if symmetrize and b is None:
        raise ConfigError("symmetrization moves column data into the rhs; pass b")
    n = a.row_map.n_global
    if a.col_map.n_global != n:
        raise ConfigError("apply_dirichlet needs a square matrix")
    is_bc = np.zeros(n, dtype=bool)
    is_bc[dofs] = True
    g = np.zeros(n)
    g[dofs] = values

    for r in range(a.row_map.n_ranks):
        p = a.parts[r]
        umap = a.row_map.unique_maps[r]
        sel = dofs[a.row_map.dof_owner[dofs] == r]
        loc = np.searchsorted(umap, sel)
        # replace constrained rows, keeping the original diagonal scale
        for i_loc, i_glob in zip(loc, sel):
            lo, hi = p.indptr[i_loc], p.indptr[i_loc + 1]
            dpos = lo + np.searchsorted(p.indices[lo:hi], i_glob)
            if dpos >= hi or p.indices[dpos] != i_glob:
                raise PatternError(f"row {i_glob} has no diagonal entry in the pattern")
            c = abs(p.data[dpos])
            if c < _TINY:
                c = 1.0
            p.data[lo:hi] = 0.0
            p.data[dpos] = c
            if b is not None:
                b.parts[r][i_loc] = c * g[i_glob]
        if symmetrize:
            rowid = np.repeat(np.arange(p.shape[0]), np.diff(p.indptr))
            entries = is_bc[p.indices] & (p.indices != umap[rowid])
            if entries.any():
                np.subtract.at(b.parts[r], rowid[entries],
                               p.data[entries] * g[p.indices[entries]])
                p.data[entries] = 0.0
    return a, b


def zero_rows(a, dofs):
    """Zero complete matrix rows in place (no diagonal is kept)."""
    dofs = np.asarray(dofs, dtype=np.int64)
    for r in range(a.row_map.n_ranks):
        p = a.parts[r]
        umap = a.row_map.unique_maps[r]
        sel = dofs[a.row_map.dof_owner[dofs] == r]
        loc = np.searchsorted(umap, sel)
        for i_loc in loc:
            p.data[p.indptr[i_loc]:p.indptr[i_loc + 1]] = 0.0
    return a
