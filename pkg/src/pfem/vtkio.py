"""Legacy ASCII VTK output (UNSTRUCTURED_GRID, POINT_DATA).

One file per call regardless of how many ranks produced the data: fields are
gathered to global numbering before anything is written, so the bytes depend
only on the mesh and the field values, never on the partitioning. P2 fields
are written at mesh vertices only; the edge-midpoint values are dropped
(vertex DoFs come first in the global numbering, so this is a plain prefix).

Values are printed with %.16e, which round-trips float64 exactly and keeps
repeated runs byte-identical. ``read_vtk`` is a minimal reader for files
written here, used by the round-trip tests; it is not a general VTK parser.
"""

import numpy as np

from .errors import ConfigError

_CELL_TYPE = {2: 5, 3: 10}   # VTK_TRIANGLE, VTK_TETRA


def _vertex_fields(mesh, fields):
    """Normalize fields to (name, kind, (nv,) or (nv, dim) array) tuples."""
    nv = mesh.n_vertices
    out = []
    for name, value in fields.items():
        dofmap = getattr(value, "dofmap", None)
        g = value.to_global() if hasattr(value, "to_global") else np.asarray(value, dtype=np.float64)
        if dofmap is not None and getattr(dofmap, "ncomp", 1) > 1:
            base = dofmap.base.n_global
            comps = [g[c * base:c * base + nv] for c in range(dofmap.ncomp)]
            out.append((name, "vector", np.stack(comps, axis=1)))
        elif g.ndim == 2:
            if g.shape[0] != nv:
                raise ConfigError(f"field '{name}' has {g.shape[0]} rows, mesh has {nv} vertices")
            out.append((name, "vector", g))
        else:
            if g.size < nv:
                raise ConfigError(f"field '{name}' has {g.size} values, mesh has {nv} vertices")
            out.append((name, "scalar", g[:nv]))
    return out


def write_vtk(mesh, fields, path, title="pfem output"):
    """fields: dict name -> DistVector or global array (scalar or (nv, dim))."""
    nv, nc, dim = mesh.n_vertices, mesh.n_cells, mesh.dim
    data = _vertex_fields(mesh, fields)
    pts = np.zeros((nv, 3))
    pts[:, :dim] = mesh.vertices
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {nv} double",
    ]
    lines += [" ".join(f"{c:.16e}" for c in row) for row in pts]
    lines.append(f"CELLS {nc} {nc * (dim + 2)}")
    lines += [f"{dim + 1} " + " ".join(str(v) for v in row) for row in mesh.cells]
    lines.append(f"CELL_TYPES {nc}")
    lines += [str(_CELL_TYPE[dim])] * nc
    if data:
        lines.append(f"POINT_DATA {nv}")
    for name, kind, values in data:
        if kind == "scalar":
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [f"{v:.16e}" for v in values]
        else:
            vec = np.zeros((nv, 3))
            vec[:, :values.shape[1]] = values
            lines.append(f"VECTORS {name} double")
            lines += [" ".join(f"{c:.16e}" for c in row) for row in vec]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk(path):
    """Read a file written by write_vtk: (points, cells, point_data)."""
    with open(path, "r", encoding="ascii") as fh:
        toks = fh.read().split("\n")
    it = iter(toks)

    def expect(prefix):
        for line in it:
            if line.startswith(prefix):
                return line.split()
        raise ConfigError(f"VTK reader: '{prefix}' section not found")

    n = int(expect("POINTS")[1])
    flat = []
    while len(flat) < 3 * n:
        flat += [float(t) for t in next(it).split()]
    points = np.array(flat).reshape(n, 3)
    hdr = expect("CELLS")
    ncells = int(hdr[1])
    cells = []
    for _ in range(ncells):
        row = [int(t) for t in next(it).split()]
        cells.append(row[1:1 + row[0]])
    cells = np.array(cells, dtype=np.int64)
    point_data = {}
    for line in it:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "SCALARS":
            next(it)    # LOOKUP_TABLE
            vals = [float(next(it)) for _ in range(n)]
            point_data[parts[1]] = np.array(vals)
        elif parts[0] == "VECTORS":
            rows = [[float(t) for t in next(it).split()] for _ in range(n)]
            point_data[parts[1]] = np.array(rows)
    return points, cells, point_data
