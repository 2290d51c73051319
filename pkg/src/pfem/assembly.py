"""Weak-form assembly from small expression trees.

Forms are built from `trial()`, `test()`, `grad`, `ddx`, `dot`,
coefficients, and `boundary(expr, markers)` for surface load terms, e.g.

    a = dot(grad(trial()), grad(test()))
    L = coefficient(f) * test() + boundary(coefficient(g) * test(), (3,))

A form is evaluated in a single fused pass over element chunks: the
geometry of a chunk is prepared once, every term of the form is evaluated
on it, and the element tensors are scattered into the distributed result.
Scalar arguments only; vector problems are composed from scalar blocks.
"""

import numpy as np

from . import ranks
from .errors import FormError, PatternError
from .fespace import LagrangeElement, QuadratureRule, facet_quadrature_for, quadrature_for
from .linalg import DistMatrix, DistVector
from .mesh import _face_keys

_MAX_AUTO_DEGREE = 4
_DEFAULT_CHUNK = 1024


# ===================== expression nodes =====================

class Expr:
    is_vector = False
    test_deg = 0
    trial_deg = 0
    quad_degree = 0

    def __add__(self, other):
        return _Sum(self, as_expr(other))

    def __radd__(self, other):
        return _Sum(as_expr(other), self)

    def __sub__(self, other):
        return _Sum(self, -as_expr(other))

    def __rsub__(self, other):
        return _Sum(as_expr(other), -self)

    def __mul__(self, other):
        return _Prod(self, as_expr(other))

    def __rmul__(self, other):
        return _Prod(as_expr(other), self)

    def __neg__(self):
        return _Prod(_Const(-1.0), self)


def as_expr(obj):
    if isinstance(obj, Expr):
        return obj
    if isinstance(obj, (int, float, np.floating, np.integer)):
        return _Const(float(obj))
    raise FormError(f"cannot use {type(obj).__name__} in a form")


class _Arg(Expr):
    def __init__(self, kind):
        self.kind = kind
        if kind == "test":
            self.test_deg = 1
        else:
            self.trial_deg = 1

    @property
    def quad_degree(self):
        return 0  # replaced per-assembly by the element degree

    def evaluate(self, ctx):
        vals = ctx.row_vals if self.kind == "test" else ctx.col_vals
        if vals is None:
            raise FormError(f"form uses a {self.kind} function the assembly has no space for")
        if self.kind == "test":
            return vals[None, :, :, None]
        return vals[None, :, None, :]

    def degree_in(self, row_el, col_el):
        return (row_el if self.kind == "test" else col_el).degree


class _Grad(Expr):
    is_vector = True

    def __init__(self, arg):
        if not isinstance(arg, _Arg):
            raise FormError("grad applies to trial() or test() only")
        self.arg = arg
        self.test_deg = arg.test_deg
        self.trial_deg = arg.trial_deg

    def evaluate(self, ctx):
        if ctx.row_grads is None:
            raise FormError("gradients are not available in boundary terms")
        g = ctx.row_grads if self.arg.kind == "test" else ctx.col_grads
        if self.arg.kind == "test":
            return g[:, :, :, None, :]
        return g[:, :, None, :, :]

    def degree_in(self, row_el, col_el):
        return max(self.arg.degree_in(row_el, col_el) - 1, 0)


class _DDx(Expr):
    def __init__(self, arg, axis):
        if not isinstance(arg, _Arg):
            raise FormError("ddx applies to trial() or test() only")
        self.arg = arg
        self.axis = int(axis)
        self.test_deg = arg.test_deg
        self.trial_deg = arg.trial_deg

    def evaluate(self, ctx):
        if ctx.row_grads is None:
            raise FormError("gradients are not available in boundary terms")
        if not 0 <= self.axis < ctx.dim:
            raise FormError(f"ddx axis {self.axis} out of range for dimension {ctx.dim}")
        g = ctx.row_grads if self.arg.kind == "test" else ctx.col_grads
        if self.arg.kind == "test":
            return g[:, :, :, None, self.axis]
        return g[:, :, None, :, self.axis]

    def degree_in(self, row_el, col_el):
        return max(self.arg.degree_in(row_el, col_el) - 1, 0)


class _Const(Expr):
    def __init__(self, value):
        self.value = float(value)

    def evaluate(self, ctx):
        return np.full((1, 1, 1, 1), self.value)

    def degree_in(self, row_el, col_el):
        return 0


class _Coef(Expr):
    def __init__(self, fn, degree):
        self.fn = fn
        self._degree = degree

    def evaluate(self, ctx):
        x = ctx.x
        out = np.asarray(self.fn(x.reshape(-1, x.shape[-1])), dtype=np.float64)
        return out.reshape(x.shape[0], x.shape[1], 1, 1)

    def degree_in(self, row_el, col_el):
        return self._degree


class _VecCoef(Expr):
    is_vector = True

    def __init__(self, fn, degree):
        self.fn = fn
        self._degree = degree

    def evaluate(self, ctx):
        x = ctx.x
        out = np.asarray(self.fn(x.reshape(-1, x.shape[-1])), dtype=np.float64)
        if out.ndim != 2 or out.shape[1] != ctx.dim:
            raise FormError("vector coefficient must return an (n, dim) array")
        return out.reshape(x.shape[0], x.shape[1], 1, 1, ctx.dim)

    def degree_in(self, row_el, col_el):
        return self._degree


class _FEFun(Expr):
    """A finite element function used as a coefficient."""

    def __init__(self, dofmap, values):
        self.dofmap = dofmap
        self.values = values.to_global() if isinstance(values, DistVector) \
            else np.asarray(values, dtype=np.float64)

    def evaluate(self, ctx):
        if ctx.cells is None:
            raise FormError("finite element coefficients are not supported in boundary terms")
        vals = self.dofmap.element.tabulate(ctx.ref_points)[0]
        loc = self.values[self.dofmap.cell_dofs[ctx.cells]]
        return np.einsum("qf,ef->eq", vals, loc)[:, :, None, None]

    def degree_in(self, row_el, col_el):
        return self.dofmap.element.degree


class _FEVecFun(Expr):
    """Component-major vector of finite element functions as a coefficient."""

    is_vector = True

    def __init__(self, dofmap, ncomp, values):
        self.dofmap = dofmap
        self.ncomp = ncomp
        vals = values.to_global() if isinstance(values, DistVector) \
            else np.asarray(values, dtype=np.float64)
        if vals.shape[0] != ncomp * dofmap.n_global:
            raise FormError("vector coefficient values have the wrong length")
        self.values = vals

    def evaluate(self, ctx):
        if ctx.cells is None:
            raise FormError("finite element coefficients are not supported in boundary terms")
        if self.ncomp != ctx.dim:
            raise FormError("vector coefficient has the wrong number of components")
        vals = self.dofmap.element.tabulate(ctx.ref_points)[0]
        cd = self.dofmap.cell_dofs[ctx.cells]
        n = self.dofmap.n_global
        comps = [np.einsum("qf,ef->eq", vals, self.values[c * n + cd])
                 for c in range(self.ncomp)]
        return np.stack(comps, axis=-1)[:, :, None, None, :]

    def degree_in(self, row_el, col_el):
        return self.dofmap.element.degree


class _Sum(Expr):
    def __init__(self, a, b):
        if (a.test_deg, a.trial_deg, a.is_vector) != (b.test_deg, b.trial_deg, b.is_vector):
            raise FormError("cannot add terms of different argument arity")
        self.a, self.b = a, b
        self.test_deg = a.test_deg
        self.trial_deg = a.trial_deg
        self.is_vector = a.is_vector

    def evaluate(self, ctx):
        return self.a.evaluate(ctx) + self.b.evaluate(ctx)

    def degree_in(self, row_el, col_el):
        return max(self.a.degree_in(row_el, col_el), self.b.degree_in(row_el, col_el))


class _Prod(Expr):
    def __init__(self, a, b):
        if a.is_vector and b.is_vector:
            raise FormError("use dot() to contract two vector expressions")
        if a.test_deg + b.test_deg > 1 or a.trial_deg + b.trial_deg > 1:
            raise FormError("forms are at most linear in the test and trial functions")
        self.a, self.b = a, b
        self.test_deg = a.test_deg + b.test_deg
        self.trial_deg = a.trial_deg + b.trial_deg
        self.is_vector = a.is_vector or b.is_vector

    def evaluate(self, ctx):
        va, vb = self.a.evaluate(ctx), self.b.evaluate(ctx)
        if self.a.is_vector != self.b.is_vector:
            if self.a.is_vector:
                vb = vb[..., None]
            else:
                va = va[..., None]
        return va * vb

    def degree_in(self, row_el, col_el):
        return self.a.degree_in(row_el, col_el) + self.b.degree_in(row_el, col_el)


class _Dot(Expr):
    def __init__(self, a, b):
        a, b = as_expr(a), as_expr(b)
        if not (a.is_vector and b.is_vector):
            raise FormError("dot() needs two vector expressions")
        if a.test_deg + b.test_deg > 1 or a.trial_deg + b.trial_deg > 1:
            raise FormError("forms are at most linear in the test and trial functions")
        self.a, self.b = a, b
        self.test_deg = a.test_deg + b.test_deg
        self.trial_deg = a.trial_deg + b.trial_deg

    def evaluate(self, ctx):
        return (self.a.evaluate(ctx) * self.b.evaluate(ctx)).sum(axis=-1)

    def degree_in(self, row_el, col_el):
        return self.a.degree_in(row_el, col_el) + self.b.degree_in(row_el, col_el)


class _Boundary(Expr):
    def __init__(self, expr, markers):
        self.expr = as_expr(expr)
        try:
            self.markers = tuple(int(m) for m in markers)
        except TypeError:
            self.markers = (int(markers),)
        self.test_deg = self.expr.test_deg
        self.trial_deg = self.expr.trial_deg
        self.is_vector = self.expr.is_vector

    def evaluate(self, ctx):
        raise FormError("boundary(...) may only appear as a top-level term")


# -------- public constructors --------

def trial():
    return _Arg("trial")


def test():
    return _Arg("test")


def grad(arg):
    return _Grad(arg)


def ddx(arg, axis):
    return _DDx(arg, axis)


def dot(a, b):
    return _Dot(a, b)


def coefficient(value, degree=2):
    """A scalar coefficient: a constant, or a callable of points (n, dim) -> (n,).

    `degree` is the polynomial degree hint used for quadrature selection.
    """
    if callable(value):
        return _Coef(value, degree)
    return _Const(value)


def vector_coefficient(fn, degree=2):
    """A vector coefficient: callable of points (n, dim) -> (n, dim)."""
    return _VecCoef(fn, degree)


def fe_function(dofmap, values):
    """Wrap DoF values (global array or DistVector) as a coefficient."""
    return _FEFun(dofmap, values)


def fe_vector_function(dofmap, ncomp, values):
    """Wrap component-major block DoF values as a vector coefficient."""
    return _FEVecFun(dofmap, ncomp, values)


def boundary(expr, markers):
    """Restrict a term to the boundary faces carrying the given markers."""
    return _Boundary(expr, markers)


def _split_terms(form):
    """Flatten the top-level sum into (volume terms, boundary terms)."""
    volume, facet = [], []
    stack = [as_expr(form)]
    while stack:
        node = stack.pop()
        if isinstance(node, _Sum):
            stack.append(node.b)
            stack.append(node.a)
        elif isinstance(node, _Boundary):
            facet.append(node)
        else:
            volume.append(node)
    return volume, facet


def _check_arity(form, test_deg, trial_deg, what):
    f = as_expr(form)
    if (f.test_deg, f.trial_deg) != (test_deg, trial_deg):
        raise FormError(f"a {what} form must be of arity (test={test_deg}, "
                        f"trial={trial_deg}); got (test={f.test_deg}, trial={f.trial_deg})")
    if f.is_vector:
        raise FormError("a form must integrate a scalar expression")


# ===================== evaluation contexts =====================

class _Ctx:
    """Everything one element chunk needs: geometry, tabulated bases, points."""

    def __init__(self, dim, ref_points, x, wdet, cells,
                 row_vals, col_vals, row_grads, col_grads):
        self.dim = dim
        self.ref_points = ref_points
        self.x = x
        self.wdet = wdet
        self.cells = cells
        self.row_vals = row_vals
        self.col_vals = col_vals
        self.row_grads = row_grads
        self.col_grads = col_grads


def _cell_geometry(mesh, cells):
    """Edge matrix, its inverse, |det| and base vertex for a batch of cells."""
    verts = mesh.vertices[mesh.cells[cells]]
    v0 = verts[:, 0, :]
    edges = verts[:, 1:, :] - verts[:, :1, :]
    det = np.abs(np.linalg.det(edges))
    inv = np.linalg.inv(edges)
    return v0, edges, inv, det


def _volume_ctx(mesh, cells, rule, row_el, col_el, need_grads):
    v0, edges, inv, det = _cell_geometry(mesh, cells)
    lam = rule.points
    x = v0[:, None, :] + np.einsum("qk,ekm->eqm", lam, edges)
    wdet = rule.weights[None, :] * det[:, None]
    row_vals, row_gref = row_el.tabulate(lam)
    col_vals = col_gref = None
    if col_el is not None:
        col_vals, col_gref = col_el.tabulate(lam)
    row_grads = col_grads = None
    if need_grads:
        row_grads = np.einsum("emk,qnk->eqnm", inv, row_gref)
        if col_el is not None:
            col_grads = np.einsum("emk,qnk->eqnm", inv, col_gref)
    return _Ctx(mesh.dim, lam, x, wdet, cells, row_vals, col_vals, row_grads, col_grads)


def _facet_ctx(mesh, faces, rule, trace_el):
    verts = mesh.vertices[faces]
    v0 = verts[:, 0, :]
    edges = verts[:, 1:, :] - verts[:, :1, :]
    gram = np.einsum("ekm,elm->ekl", edges, edges)
    scale = np.sqrt(np.abs(np.linalg.det(gram)))
    lam = rule.points
    x = v0[:, None, :] + np.einsum("qk,ekm->eqm", lam, edges)
    wdet = rule.weights[None, :] * scale[:, None]
    vals, _ = trace_el.tabulate(lam)
    return _Ctx(mesh.dim, lam, x, wdet, None, vals, None, None, None)


def _needs_grads(terms):
    stack = list(terms)
    while stack:
        n = stack.pop()
        if isinstance(n, (_Grad, _DDx)):
            return True
        for attr in ("a", "b", "arg", "expr"):
            child = getattr(n, attr, None)
            if child is not None:
                stack.append(child)
    return False


def _pick_rule(terms, dim, row_el, col_el, facet=False):
    deg = 1
    for t in terms:
        deg = max(deg, t.degree_in(row_el, col_el))
    deg = min(deg, _MAX_AUTO_DEGREE)
    return facet_quadrature_for(dim, deg) if facet else quadrature_for(dim, deg)


def _resolve_rule(quadrature, dim, facet=False):
    if quadrature is None:
        return None
    if isinstance(quadrature, QuadratureRule):
        return quadrature
    return facet_quadrature_for(dim, int(quadrature)) if facet \
        else quadrature_for(dim, int(quadrature))


# ===================== matrix pattern =====================

class MatrixGraph:
    """Per-rank CSR pattern over owned rows; global column indices.

    `keys[r]` holds row * n_cols_global + col, sorted, aligned with the CSR
    data layout, so scattering is a searchsorted per contribution batch.
    """

    def __init__(self, row_map, col_map, keys):
        self.row_map = row_map
        self.col_map = col_map
        self.keys = keys
        ncg = col_map.n_global
        self.indptr = []
        self.indices = []
        for r, k in enumerate(keys):
            rows = (k // ncg).astype(np.int64)
            local = np.searchsorted(row_map.unique_maps[r], rows)
            counts = np.bincount(local, minlength=len(row_map.unique_maps[r]))
            self.indptr.append(np.concatenate([[0], np.cumsum(counts)]).astype(np.int64))
            self.indices.append((k % ncg).astype(np.int64))

    @property
    def n_ranks(self):
        return self.row_map.n_ranks

    def nnz(self):
        return sum(len(k) for k in self.keys)

    def empty_matrix(self):
        import scipy.sparse as sp
        parts = []
        ncg = self.col_map.n_global
        for r in range(self.n_ranks):
            n_own = len(self.row_map.unique_maps[r])
            parts.append(sp.csr_matrix(
                (np.zeros(len(self.indices[r])), self.indices[r].copy(),
                 self.indptr[r].copy()), shape=(n_own, ncg)))
        return DistMatrix(self.row_map, self.col_map, parts, self)


def build_graph(row_map, col_map=None, chunk=4096):
    """Sparsity pattern of a bilinear form on (row_map, col_map)."""
    col_map = row_map if col_map is None else col_map
    ncg = col_map.n_global
    rows_cd = row_map.cell_dofs
    cols_cd = col_map.cell_dofs
    chunks = []
    for lo in range(0, rows_cd.shape[0], chunk):
        r = rows_cd[lo:lo + chunk].astype(np.int64)
        c = cols_cd[lo:lo + chunk].astype(np.int64)
        k = (r[:, :, None] * ncg + c[:, None, :]).ravel()
        chunks.append(np.unique(k))
    keys = np.unique(np.concatenate(chunks)) if chunks else np.empty(0, np.int64)
    owner = row_map.dof_owner[(keys // ncg)]
    per_rank = [keys[owner == r] for r in range(row_map.n_ranks)]
    return MatrixGraph(row_map, col_map, per_rank)


# ===================== assembly drivers =====================

def _scatter_matrix(graph, rank, data, keys, vals):
    pos = np.searchsorted(graph.keys[rank], keys)
    pos_c = np.minimum(pos, max(len(graph.keys[rank]) - 1, 0))
    if len(graph.keys[rank]) == 0 or not np.array_equal(graph.keys[rank][pos_c], keys):
        raise PatternError("assembled entry outside the matrix graph")
    np.add.at(data, pos, vals)


def assemble_matrix(form, row_map, col_map=None, quadrature=None, graph=None,
                    overlapped=False, workers=None, chunk=_DEFAULT_CHUNK):
    """Assemble a bilinear form into a DistMatrix.

    Standard mode: each rank integrates its owned elements and exports
    contributions to foreign-owned rows, which are consolidated in ascending
    source-rank order. Overlapped mode integrates owned plus halo elements
    and keeps every locally computable row local; rows whose element support
    is not covered by the halo fall back to the export path.
    """
    _check_arity(form, 1, 1, "bilinear")
    col_map = row_map if col_map is None else col_map
    volume, facet = _split_terms(form)
    if facet:
        raise FormError("boundary terms are not supported in bilinear forms")
    mesh = row_map.mesh
    part = row_map.partition
    rule = _resolve_rule(quadrature, mesh.dim) or \
        _pick_rule(volume, mesh.dim, row_map.element, col_map.element)
    need_grads = _needs_grads(volume)
    if graph is None:
        graph = build_graph(row_map, col_map)
    n_ranks = row_map.n_ranks
    ncg = col_map.n_global
    covered = row_map.support_covered if overlapped else None

    def work(r):
        cells_r = part.local[r] if overlapped else part.owned[r]
        data = np.zeros(len(graph.keys[r]))
        outbox = {}
        for lo in range(0, len(cells_r), chunk):
            cells = cells_r[lo:lo + chunk]
            ctx = _volume_ctx(mesh, cells, rule, row_map.element, col_map.element,
                              need_grads)
            acc = None
            for term in volume:
                v = term.evaluate(ctx)
                acc = v if acc is None else acc + v
            elem = (acc * ctx.wdet[:, :, None, None]).sum(axis=1)
            elem = np.broadcast_to(
                elem, (len(cells), row_map.element.n_dofs, col_map.element.n_dofs))
            rows = row_map.cell_dofs[cells].astype(np.int64)
            cols = col_map.cell_dofs[cells].astype(np.int64)
            keys = rows[:, :, None] * ncg + cols[:, None, :]
            row_owner = np.broadcast_to(row_map.dof_owner[rows][:, :, None], keys.shape)
            if overlapped:
                own_cell = np.broadcast_to(
                    (part.owner[cells] == r)[:, None, None], keys.shape)
                local_mask = (row_owner == r) & (
                    covered[rows][:, :, None] | own_cell)
                _scatter_matrix(graph, r, data, keys[local_mask].ravel(),
                                elem[local_mask].ravel())
                send = own_cell & (row_owner != r) & ~covered[rows][:, :, None]
                dests = row_owner[send]
            else:
                local_mask = row_owner == r
                _scatter_matrix(graph, r, data, keys[local_mask].ravel(),
                                elem[local_mask].ravel())
                send = ~local_mask
                dests = row_owner[send]
            if send.any():
                skeys, svals = keys[send], elem[send]
                for dest in np.unique(dests):
                    sel = dests == dest
                    outbox.setdefault(int(dest), []).append((skeys[sel], svals[sel]))
        return data, outbox

    results = ranks.map_ranks(n_ranks, work, workers)
    datas = [d for d, _ in results]
    for src in range(n_ranks):                   # ascending source rank order
        for dest, batches in sorted(results[src][1].items()):
            for keys, vals in batches:
                _scatter_matrix(graph, dest, datas[dest], keys, vals)

    import scipy.sparse as sp
    parts = []
    for r in range(n_ranks):
        n_own = len(row_map.unique_maps[r])
        parts.append(sp.csr_matrix((datas[r], graph.indices[r], graph.indptr[r]),
                                   shape=(n_own, ncg)))
    return DistMatrix(row_map, col_map, parts, graph)


def _boundary_face_cells(mesh):
    """Adjacent cell index for every boundary face."""
    nv = mesh.n_vertices
    cf = mesh.cell_faces()
    ckeys = _face_keys(cf, nv)
    order = np.argsort(ckeys, kind="stable")
    bkeys = _face_keys(mesh.boundary_faces, nv)
    pos = np.searchsorted(ckeys[order], bkeys)
    return order[pos] // (mesh.dim + 1)


def assemble_vector(form, dofmap, quadrature=None, workers=None, chunk=_DEFAULT_CHUNK):
    """Assemble a linear form (volume and boundary terms) into a DistVector."""
    _check_arity(form, 1, 0, "linear")
    volume, facet = _split_terms(form)
    mesh = dofmap.mesh
    part = dofmap.partition
    el = dofmap.element
    n_ranks = dofmap.n_ranks
    vol_rule = None
    if volume:
        vol_rule = _resolve_rule(quadrature, mesh.dim) or \
            _pick_rule(volume, mesh.dim, el, None)
    need_grads = _needs_grads(volume)
    facet_jobs = []
    if facet:
        trace_el = LagrangeElement(mesh.dim - 1, el.degree)
        face_cell = _boundary_face_cells(mesh)
        for node in facet:
            sel = np.isin(mesh.boundary_markers, node.markers)
            faces = mesh.boundary_faces[sel]
            frule = _resolve_rule(quadrature, mesh.dim, facet=True) or \
                _pick_rule([node.expr], mesh.dim, trace_el, None, facet=True)
            facet_jobs.append((node.expr, faces, dofmap.face_dof_rows(faces),
                               part.owner[face_cell[sel]], frule, trace_el))

    def work(r):
        data = np.zeros(len(dofmap.unique_maps[r]))
        outbox = {}

        def route(rows, vals):
            owner = dofmap.dof_owner[rows]
            mine = owner == r
            loc = np.searchsorted(dofmap.unique_maps[r], rows[mine])
            np.add.at(data, loc, vals[mine])
            for dest in np.unique(owner[~mine]):
                sel = owner == dest
                outbox.setdefault(int(dest), []).append((rows[sel], vals[sel]))

        if volume:
            cells_r = part.owned[r]
            for lo in range(0, len(cells_r), chunk):
                cells = cells_r[lo:lo + chunk]
                ctx = _volume_ctx(mesh, cells, vol_rule, el, None, need_grads)
                acc = None
                for term in volume:
                    v = term.evaluate(ctx)
                    acc = v if acc is None else acc + v
                elem = (acc * ctx.wdet[:, :, None, None]).sum(axis=1)[:, :, 0]
                elem = np.broadcast_to(elem, (len(cells), el.n_dofs))
                rows = dofmap.cell_dofs[cells].astype(np.int64)
                route(rows.ravel(), elem.ravel())
        for expr, faces, fdofs, fowners, frule, trace_el in facet_jobs:
            sel = fowners == r
            if not sel.any():
                continue
            for lo in range(0, int(sel.sum()), chunk):
                idx = np.flatnonzero(sel)[lo:lo + chunk]
                ctx = _facet_ctx(mesh, faces[idx], frule, trace_el)
                v = expr.evaluate(ctx)
                elem = (v * ctx.wdet[:, :, None, None]).sum(axis=1)[:, :, 0]
                elem = np.broadcast_to(elem, (len(idx), trace_el.n_dofs))
                route(fdofs[idx].astype(np.int64).ravel(), elem.ravel())
        return data, outbox

    results = ranks.map_ranks(n_ranks, work, workers)
    datas = [d for d, _ in results]
    for src in range(n_ranks):
        for dest, batches in sorted(results[src][1].items()):
            for rows, vals in batches:
                loc = np.searchsorted(dofmap.unique_maps[dest], rows)
                np.add.at(datas[dest], loc, vals)
    return DistVector(dofmap, datas, "unique")


def assemble_lumped_mass(dofmap, workers=None, chunk=_DEFAULT_CHUNK):
    """Diagonally lumped mass: element diagonals scaled to preserve the
    element volume (row sums of the consistent mass can vanish or go
    negative for quadratic elements, so plain row-sum lumping is unusable)."""
    mesh = dofmap.mesh
    part = dofmap.partition
    el = dofmap.element
    rule = quadrature_for(mesh.dim, min(2 * el.degree, _MAX_AUTO_DEGREE))
    n_ranks = dofmap.n_ranks

    def work(r):
        data = np.zeros(len(dofmap.unique_maps[r]))
        outbox = {}
        cells_r = part.owned[r]
        for lo in range(0, len(cells_r), chunk):
            cells = cells_r[lo:lo + chunk]
            ctx = _volume_ctx(mesh, cells, rule, el, None, need_grads=False)
            diag = np.einsum("qn,qn,eq->en", ctx.row_vals, ctx.row_vals, ctx.wdet)
            vol = ctx.wdet.sum(axis=1)
            elem = diag * (vol / diag.sum(axis=1))[:, None]
            rows = dofmap.cell_dofs[cells].astype(np.int64).ravel()
            vals = elem.ravel()
            owner = dofmap.dof_owner[rows]
            mine = owner == r
            loc = np.searchsorted(dofmap.unique_maps[r], rows[mine])
            np.add.at(data, loc, vals[mine])
            for dest in np.unique(owner[~mine]):
                sel = owner == dest
                outbox.setdefault(int(dest), []).append((rows[sel], vals[sel]))
        return data, outbox

    results = ranks.map_ranks(n_ranks, work, workers)
    datas = [d for d, _ in results]
    for src in range(n_ranks):
        for dest, batches in sorted(results[src][1].items()):
            for rows, vals in batches:
                loc = np.searchsorted(dofmap.unique_maps[dest], rows)
                np.add.at(datas[dest], loc, vals)
    return DistVector(dofmap, datas, "unique")


# ===================== interpolation and errors =====================

def interpolate(fn, dofmap):
    """Nodal interpolation of fn(points (n, dim)) -> (n,) onto the space."""
    pts = dofmap.dof_points
    parts = []
    for r in range(dofmap.n_ranks):
        own = dofmap.unique_maps[r]
        parts.append(np.asarray(fn(pts[own]), dtype=np.float64).reshape(len(own)))
    return DistVector(dofmap, parts, "unique")


def integrate_error(u, exact, dofmap, grad_exact=None, quadrature=None,
                    workers=None, chunk=_DEFAULT_CHUNK):
    """L2 error of a DoF vector against a callable, plus the H1 seminorm
    error when grad_exact (points -> (n, dim)) is given.

    Returns (l2, h1_semi); h1_semi is None without grad_exact.
    """
    mesh = dofmap.mesh
    part = dofmap.partition
    el = dofmap.element
    rule = _resolve_rule(quadrature, mesh.dim) or quadrature_for(mesh.dim, _MAX_AUTO_DEGREE)
    ug = u.to_global() if isinstance(u, DistVector) else np.asarray(u, dtype=np.float64)

    def work(r):
        l2 = 0.0
        h1 = 0.0
        cells_r = part.owned[r]
        for lo in range(0, len(cells_r), chunk):
            cells = cells_r[lo:lo + chunk]
            ctx = _volume_ctx(mesh, cells, rule, el, None, need_grads=grad_exact is not None)
            loc = ug[dofmap.cell_dofs[cells]]
            uh = np.einsum("qn,en->eq", ctx.row_vals, loc)
            ue = np.asarray(exact(ctx.x.reshape(-1, mesh.dim))).reshape(uh.shape)
            l2 += float((ctx.wdet * (uh - ue) ** 2).sum())
            if grad_exact is not None:
                gh = np.einsum("eqnm,en->eqm", ctx.row_grads, loc)
                ge = np.asarray(grad_exact(ctx.x.reshape(-1, mesh.dim))) \
                    .reshape(gh.shape)
                h1 += float((ctx.wdet[:, :, None] * (gh - ge) ** 2).sum())
        return l2, h1

    parts = ranks.map_ranks(dofmap.n_ranks, work, workers)
    l2 = np.sqrt(ranks.reduce_sum([p[0] for p in parts]))
    h1 = np.sqrt(ranks.reduce_sum([p[1] for p in parts])) if grad_exact is not None else None
    return l2, h1
