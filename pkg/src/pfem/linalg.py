"""Row-partitioned sparse linear algebra with deterministic reductions.

Vectors and matrices are split over ranks by the owned (unique) DoF maps.
Every global reduction folds per-rank partial results in ascending rank
order, and the Schwarz preconditioner applies its subdomain corrections in
ascending subdomain order, so iteration counts and residual histories are
bitwise reproducible for any worker count.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import ranks
from .errors import ConfigError, PatternError, SolverError

log = logging.getLogger("pfem.linalg")


# ===================== distributed vectors =====================

class DistVector:
    """Per-rank value chunks over the unique (owned) or repeated maps."""

    def __init__(self, dofmap, parts, mode="unique"):
        if mode not in ("unique", "repeated"):
            raise ConfigError(f"unknown vector mode {mode!r}")
        self.dofmap = dofmap
        self.parts = parts
        self.mode = mode

    # -------- construction --------

    @classmethod
    def zeros(cls, dofmap, mode="unique"):
        maps = dofmap.unique_maps if mode == "unique" else dofmap.repeated_maps
        return cls(dofmap, [np.zeros(len(m)) for m in maps], mode)

    @classmethod
    def from_global(cls, dofmap, arr, mode="unique"):
        arr = np.asarray(arr, dtype=np.float64)
        maps = dofmap.unique_maps if mode == "unique" else dofmap.repeated_maps
        return cls(dofmap, [arr[m].copy() for m in maps], mode)

    def to_global(self):
        """Gather to one global array (owner values; rank order)."""
        if self.mode != "unique":
            return self.to_unique().to_global()
        return ranks.gather_global(self.dofmap.n_global, self.dofmap.unique_maps, self.parts)

    def to_repeated(self):
        """Each rank fetches its repeated-map values from the owners."""
        g = self.to_global()
        return DistVector(self.dofmap, [g[m].copy() for m in self.dofmap.repeated_maps],
                          "repeated")

    def to_unique(self, op="restrict"):
        """repeated -> unique: either restrict to owned entries or sum every
        rank's contributions into the owner (in ascending rank order)."""
        if self.mode == "unique":
            return self.copy()
        dm = self.dofmap
        if op == "restrict":
            parts = []
            for r in range(dm.n_ranks):
                pos = np.searchsorted(dm.repeated_maps[r], dm.unique_maps[r])
                parts.append(self.parts[r][pos].copy())
            return DistVector(dm, parts, "unique")
        if op == "sum":
            g = np.zeros(dm.n_global)
            for r in range(dm.n_ranks):
                np.add.at(g, dm.repeated_maps[r], self.parts[r])
            return DistVector.from_global(dm, g)
        raise ConfigError(f"unknown to_unique op {op!r}")

    # -------- arithmetic (unique mode) --------

    def copy(self):
        return DistVector(self.dofmap, [p.copy() for p in self.parts], self.mode)

    def fill(self, value):
        for p in self.parts:
            p[:] = value
        return self

    def scale(self, alpha):
        for p in self.parts:
            p *= alpha
        return self

    def axpy(self, alpha, x):
        """self += alpha * x"""
        for p, q in zip(self.parts, x.parts):
            p += alpha * q
        return self

    def aypx(self, alpha, x):
        """self = alpha * self + x"""
        for p, q in zip(self.parts, x.parts):
            p *= alpha
            p += q
        return self

    def set(self, x):
        for p, q in zip(self.parts, x.parts):
            p[:] = q
        return self

    def dot(self, other):
        if self.mode != "unique" or other.mode != "unique":
            raise ConfigError("dot is defined on unique-mode vectors")
        partials = [float(np.dot(p, q)) for p, q in zip(self.parts, other.parts)]
        return ranks.reduce_sum(partials)

    def norm(self):
        return np.sqrt(self.dot(self))


# ===================== distributed matrices =====================

class DistMatrix:
    """CSR rows of the owned DoFs per rank; column indices are global."""

    def __init__(self, row_map, col_map, parts, graph=None):
        self.row_map = row_map
        self.col_map = col_map
        self.parts = parts
        self.graph = graph

    @property
    def shape(self):
        return (self.row_map.n_global, self.col_map.n_global)

    def copy(self):
        return DistMatrix(self.row_map, self.col_map, [p.copy() for p in self.parts],
                          self.graph)

    def matvec(self, x, workers=None):
        """y = A x. The single pre-multiply exchange gathers the needed
        off-rank x entries (here: the full column vector)."""
        xg = x.to_global()
        parts = ranks.map_ranks(self.row_map.n_ranks,
                                lambda r: self.parts[r] @ xg, workers)
        return DistVector(self.row_map, parts, "unique")

    def diagonal(self):
        parts = []
        for r in range(self.row_map.n_ranks):
            rows = self.row_map.unique_maps[r]
            parts.append(_csr_fetch(self.parts[r], np.arange(len(rows)), rows))
        return DistVector(self.row_map, parts, "unique")

    def to_scipy(self):
        """Gather to one global CSR (deterministic)."""
        rows, cols, vals = [], [], []
        for r in range(self.row_map.n_ranks):
            a = self.parts[r]
            rmap = self.row_map.unique_maps[r]
            rows.append(np.repeat(rmap, np.diff(a.indptr)))
            cols.append(a.indices.astype(np.int64))
            vals.append(a.data)
        m = sp.coo_matrix((np.concatenate(vals),
                           (np.concatenate(rows), np.concatenate(cols))),
                          shape=self.shape)
        out = m.tocsr()
        out.sort_indices()
        return out

    def transpose(self):
        """Gather-transpose-scatter; rows of the result follow col_map ownership."""
        gt = self.to_scipy().T.tocsr()
        gt.sort_indices()
        parts = [gt[self.col_map.unique_maps[r]] for r in range(self.col_map.n_ranks)]
        return DistMatrix(self.col_map, self.row_map, parts)

    @classmethod
    def from_scipy(cls, row_map, col_map, a, graph=None):
        a = a.tocsr()
        parts = []
        for r in range(row_map.n_ranks):
            p = a[row_map.unique_maps[r]].copy()
            p.sort_indices()
            parts.append(p)
        return cls(row_map, col_map, parts, graph)

    @classmethod
    def combine(cls, terms):
        """Linear combination sum(alpha_i * A_i) of pattern-identical matrices."""
        (a0, m0) = terms[0]
        for _, m in terms[1:]:
            for p, q in zip(m0.parts, m.parts):
                if p.indptr is not q.indptr and not np.array_equal(p.indptr, q.indptr):
                    raise PatternError("matrices in a combination must share their pattern")
                if p.indices is not q.indices and not np.array_equal(p.indices, q.indices):
                    raise PatternError("matrices in a combination must share their pattern")
        parts = []
        for r in range(m0.row_map.n_ranks):
            data = a0 * m0.parts[r].data.copy()
            for (al, m) in terms[1:]:
                data += al * m.parts[r].data
            parts.append(sp.csr_matrix((data, m0.parts[r].indices, m0.parts[r].indptr),
                                       shape=m0.parts[r].shape))
        return cls(m0.row_map, m0.col_map, parts, m0.graph)


def _csr_fetch(a, local_rows, global_cols):
    """Entries a[local_rows, global_cols]; zeros where outside the pattern."""
    out = np.zeros(len(local_rows))
    for k, (i, j) in enumerate(zip(local_rows, global_cols)):
        lo, hi = a.indptr[i], a.indptr[i + 1]
        pos = lo + np.searchsorted(a.indices[lo:hi], j)
        if pos < hi and a.indices[pos] == j:
            out[k] = a.data[pos]
    return out


def spmv(a, x, workers=None):
    """Distributed sparse matrix-vector product."""
    return a.matvec(x, workers)


def write_matrix_market(a, path):
    """Export the gathered matrix in Matrix Market coordinate format."""
    scipy.io.mmwrite(path, a.to_scipy())


# ===================== preconditioners =====================

class IdentityPreconditioner:
    def apply(self, r):
        return r.copy()


class JacobiPreconditioner:
    def __init__(self, a):
        d = a.diagonal()
        for p in d.parts:
            if (p == 0.0).any():
                raise PatternError("zero diagonal entry; Jacobi undefined")
        self.inv_diag = [1.0 / p for p in d.parts]
        self.row_map = a.row_map

    def apply(self, r):
        return DistVector(r.dofmap, [p * d for p, d in zip(r.parts, self.inv_diag)],
                          "unique")


class ILU0Factor:
    """Zero-fill incomplete LU of one CSR block: L unit lower, U upper,
    both on the block's own sparsity pattern."""

    def __init__(self, lower, upper):
        self.lower = lower
        self.upper = upper

    def solve(self, b):
        y = spla.spsolve_triangular(self.lower, b, lower=True, unit_diagonal=True)
        return spla.spsolve_triangular(self.upper, y, lower=False)


def ilu0_factor(a, shift=1e-12):
    """ILU(0): factor on the pattern of a (square CSR).

    A structurally missing diagonal raises PatternError; a numerically zero
    pivot is replaced by a sign-preserving shift with a logged warning.
    """
    a = a.tocsr()
    n = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise ConfigError("ILU(0) needs a square matrix")
    indptr, indices = a.indptr, a.indices
    data = a.data.astype(np.float64).copy()
    diag_pos = np.empty(n, dtype=np.int64)
    for i in range(n):
        lo, hi = indptr[i], indptr[i + 1]
        cols = indices[lo:hi]
        p = lo + np.searchsorted(cols, i)
        if p >= hi or indices[p] != i:
            raise PatternError(f"row {i} has no diagonal entry in the pattern")
        diag_pos[i] = p

    shifted = 0
    for i in range(n):
        lo, hi = indptr[i], indptr[i + 1]
        cols = indices[lo:hi]
        dp = diag_pos[i]
        for t in range(lo, dp):
            k = indices[t]
            ukk = data[diag_pos[k]]
            lik = data[t] / ukk
            data[t] = lik
            # subtract lik * U[k, j] for the js present in row i beyond k
            klo, khi = diag_pos[k], indptr[k + 1]
            kcols = indices[klo:khi]
            pos_in_i = t + 1 + np.searchsorted(cols[t - lo + 1:], kcols)
            hit = (pos_in_i < hi) & (indices[np.minimum(pos_in_i, hi - 1)] == kcols)
            data[pos_in_i[hit]] -= lik * data[klo:khi][hit]
        piv = data[dp]
        if abs(piv) < shift:
            data[dp] = shift if piv >= 0.0 else -shift
            shifted += 1
    if shifted:
        log.warning("ilu0_factor: %d zero pivots replaced by +/-%g", shifted, shift)

    lu = sp.csr_matrix((data, indices.copy(), indptr.copy()), shape=a.shape)
    lower = sp.tril(lu, k=-1).tocsr() + sp.eye(n, format="csr")
    upper = sp.triu(lu, k=0).tocsr()
    return ILU0Factor(lower, upper)


class _DenseLU:
    def __init__(self, a):
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")          # singularity reported as an error below
            self.fac = scipy.linalg.lu_factor(a.toarray())
        piv = np.diag(self.fac[0])
        if not np.all(np.isfinite(piv)) or np.any(piv == 0.0):
            raise SolverError("singular subdomain matrix under dense LU")

    def solve(self, b):
        return scipy.linalg.lu_solve(self.fac, b)


class _SparseLU:
    def __init__(self, a):
        self.fac = spla.splu(a.tocsc())

    def solve(self, b):
        return self.fac.solve(b)


_SUBDOMAIN_SOLVERS = {"dense-lu": _DenseLU, "sparse-lu": _SparseLU,
                      "ilu0": lambda a: ilu0_factor(a)}


class SchwarzPreconditioner:
    """Additive Schwarz: P^-1 r = sum_i R_i^T A_i^-1 R_i r with
    A_i = R_i A R_i^T, one subdomain per rank, summed unweighted in
    ascending subdomain order."""

    def __init__(self, row_map, index_sets, factors, factor_seconds):
        self.row_map = row_map
        self.index_sets = index_sets
        self.factors = factors
        self.factor_seconds = factor_seconds

    def apply(self, r, workers=None):
        rg = r.to_global()                                # restriction gather
        locals_ = ranks.map_ranks(
            len(self.index_sets),
            lambda i: self.factors[i].solve(rg[self.index_sets[i]]), workers)
        z = np.zeros(self.row_map.n_global)
        for idx, zi in zip(self.index_sets, locals_):     # extension scatter-add
            z[idx] += zi
        return DistVector.from_global(r.dofmap, z)


def schwarz_index_sets(a_global, row_map, overlap):
    """Owned rows expanded by `overlap` layers of matrix-graph adjacency."""
    if overlap < 0:
        raise ConfigError("overlap must be >= 0")
    sets = []
    for r in range(row_map.n_ranks):
        members = np.zeros(row_map.n_global, dtype=bool)
        idx = row_map.unique_maps[r]
        members[idx] = True
        frontier = idx
        for _ in range(overlap):
            cols = np.unique(np.concatenate(
                [a_global.indices[a_global.indptr[i]:a_global.indptr[i + 1]]
                 for i in frontier])) if len(frontier) else np.empty(0, np.int64)
            new = cols[~members[cols]]
            members[new] = True
            frontier = new
        sets.append(np.flatnonzero(members))
    return sets


def build_schwarz(a, overlap=1, subdomain_solver="sparse-lu", workers=None):
    """Build the additive Schwarz preconditioner for a square DistMatrix."""
    if subdomain_solver not in _SUBDOMAIN_SOLVERS:
        raise ConfigError(f"unknown subdomain solver {subdomain_solver!r}")
    a_global = a.to_scipy()
    sets = schwarz_index_sets(a_global, a.row_map, overlap)
    make = _SUBDOMAIN_SOLVERS[subdomain_solver]

    def factor_one(i):
        idx = sets[i]
        sub = a_global[idx][:, idx].tocsr()
        t0 = time.perf_counter()
        try:
            fac = make(sub)
        except (SolverError, RuntimeError) as exc:
            raise SolverError(f"factorization of subdomain {i} failed: {exc}") from exc
        return fac, time.perf_counter() - t0

    results = ranks.map_ranks(len(sets), factor_one, workers)
    factors = [f for f, _ in results]
    seconds = [t for _, t in results]
    return SchwarzPreconditioner(a.row_map, sets, factors, seconds)


def apply_preconditioner(pc, r):
    """z = P⁻¹ r for any built preconditioner object."""
    return pc.apply(r)


def make_preconditioner(a, config):
    kind = config.preconditioner
    if kind == "none":
        return IdentityPreconditioner()
    if kind == "jacobi":
        return JacobiPreconditioner(a)
    if kind == "ilu0":
        # per-rank block ILU(0): Schwarz with zero overlap and ILU(0) blocks,
        # which is the exact global ILU(0) when running on one rank
        return build_schwarz(a, overlap=0, subdomain_solver="ilu0",
                             workers=config.workers)
    if kind == "schwarz":
        return build_schwarz(a, overlap=config.overlap,
                             subdomain_solver=config.subdomain_solver,
                             workers=config.workers)
    raise ConfigError(f"unknown preconditioner {kind!r}")


# ===================== Krylov solvers =====================

@dataclass
class SolverConfig:
    method: str = "cg"
    tol: float = 1e-10
    max_iters: int = 1000
    restart: int = 50
    preconditioner: str = "none"
    overlap: int = 1
    subdomain_solver: str = "sparse-lu"
    workers: int = None

    def __post_init__(self):
        if self.method not in ("cg", "gmres", "bicgstab"):
            raise ConfigError(f"unknown solver method '{self.method}'")
        if not self.tol > 0.0:
            raise ConfigError(f"solver tol must be positive, got {self.tol}")
        if self.restart < 1:
            raise ConfigError(f"gmres restart must be >= 1, got {self.restart}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.preconditioner not in ("none", "jacobi", "ilu0", "schwarz"):
            raise ConfigError(f"unknown preconditioner '{self.preconditioner}'")


@dataclass
class SolveResult:
    x: DistVector
    iterations: int
    relres: float
    converged: bool
    history: list = field(default_factory=list)


def solve(a, b, config, x0=None, preconditioner=None):
    """Solve a x = b with the configured Krylov method.

    `a` needs .matvec(DistVector) and .row_map; a prebuilt preconditioner
    (object with .apply) overrides the one named in the config.
    """
    if preconditioner is None:
        preconditioner = make_preconditioner(a, config)
    x0 = DistVector.zeros(a.row_map) if x0 is None else x0.copy()
    if config.method == "cg":
        return _cg(a, b, x0, preconditioner, config)
    if config.method == "gmres":
        return _gmres(a, b, x0, preconditioner, config)
    if config.method == "bicgstab":
        return _bicgstab(a, b, x0, preconditioner, config)
    raise ConfigError(f"unknown solver method {config.method!r}")


def _residual(a, b, x):
    r = b.copy()
    r.axpy(-1.0, a.matvec(x))
    return r


def _cg(a, b, x, M, cfg):
    bnorm = b.norm()
    if bnorm == 0.0:
        return SolveResult(x.fill(0.0), 0, 0.0, True, [0.0])
    r = _residual(a, b, x)
    z = M.apply(r)
    p = z.copy()
    rz = r.dot(z)
    history = [np.sqrt(abs(rz))]
    it = 0
    while it < cfg.max_iters:
        q = a.matvec(p)
        pq = p.dot(q)
        if pq == 0.0 or not np.isfinite(pq):
            raise SolverError("cg breakdown: p'Ap is zero or not finite", it)
        alpha = rz / pq
        x.axpy(alpha, p)
        r.axpy(-alpha, q)
        it += 1
        z = M.apply(r)
        rz_new = r.dot(z)
        history.append(np.sqrt(abs(rz_new)))
        if r.norm() <= cfg.tol * bnorm:
            # recurrence says converged; accept only if the true residual agrees
            rt = _residual(a, b, x)
            relres = rt.norm() / bnorm
            if relres <= cfg.tol:
                return SolveResult(x, it, relres, True, history)
            r = rt
            z = M.apply(r)
            rz_new = r.dot(z)
        beta = rz_new / rz
        rz = rz_new
        p.aypx(beta, z)
    relres = _residual(a, b, x).norm() / bnorm
    return SolveResult(x, it, relres, relres <= cfg.tol, history)


def _gmres(a, b, x, M, cfg):
    bnorm = b.norm()
    if bnorm == 0.0:
        return SolveResult(x.fill(0.0), 0, 0.0, True, [0.0])
    m = max(1, cfg.restart)
    it = 0
    history = []
    while it < cfg.max_iters:
        r = _residual(a, b, x)
        beta = r.norm()
        history.append(beta / bnorm)
        if beta / bnorm <= cfg.tol:
            return SolveResult(x, it, beta / bnorm, True, history)
        v = [r.copy().scale(1.0 / beta)]
        h = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        k = 0
        while k < m and it < cfg.max_iters:
            w = a.matvec(M.apply(v[k]))
            norm_pre = w.norm()
            for i in range(k + 1):
                h[i, k] = w.dot(v[i])
                w.axpy(-h[i, k], v[i])
            # one extra modified Gram-Schmidt pass on severe cancellation
            if w.norm() < 1e-8 * norm_pre:
                for i in range(k + 1):
                    corr = w.dot(v[i])
                    h[i, k] += corr
                    w.axpy(-corr, v[i])
            h[k + 1, k] = w.norm()
            lucky = h[k + 1, k] == 0.0
            if not lucky:
                v.append(w.scale(1.0 / h[k + 1, k]))
            # apply stored Givens rotations, then a new one
            for i in range(k):
                t = cs[i] * h[i, k] + sn[i] * h[i + 1, k]
                h[i + 1, k] = -sn[i] * h[i, k] + cs[i] * h[i + 1, k]
                h[i, k] = t
            denom = np.hypot(h[k, k], h[k + 1, k])
            if denom == 0.0:
                raise SolverError("gmres breakdown: zero Hessenberg column", it)
            cs[k], sn[k] = h[k, k] / denom, h[k + 1, k] / denom
            h[k, k] = denom
            h[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            it += 1
            k += 1
            history.append(abs(g[k]) / bnorm)
            if lucky or abs(g[k]) / bnorm <= cfg.tol:
                break
        y = scipy.linalg.solve_triangular(h[:k, :k], g[:k])
        z = DistVector.zeros(a.row_map)
        for i in range(k):
            z.axpy(y[i], v[i])
        x.axpy(1.0, M.apply(z))
        # explicit true-residual check closes every restart cycle
        relres = _residual(a, b, x).norm() / bnorm
        if relres <= cfg.tol:
            return SolveResult(x, it, relres, True, history)
    relres = _residual(a, b, x).norm() / bnorm
    return SolveResult(x, it, relres, relres <= cfg.tol, history)


def _bicgstab(a, b, x, M, cfg):
    bnorm = b.norm()
    if bnorm == 0.0:
        return SolveResult(x.fill(0.0), 0, 0.0, True, [0.0])
    r = _residual(a, b, x)
    rhat = r.copy()
    rho = alpha = omega = 1.0
    v = DistVector.zeros(a.row_map)
    p = DistVector.zeros(a.row_map)
    history = [r.norm() / bnorm]
    it = 0
    while it < cfg.max_iters:
        rho_new = rhat.dot(r)
        if rho_new == 0.0 or not np.isfinite(rho_new):
            raise SolverError("bicgstab breakdown: rho is zero or not finite", it)
        if it == 0:
            p = r.copy()
        else:
            beta = (rho_new / rho) * (alpha / omega)
            p.axpy(-omega, v)
            p.aypx(beta, r)
        rho = rho_new
        ph = M.apply(p)
        v = a.matvec(ph)
        denom = rhat.dot(v)
        if denom == 0.0:
            raise SolverError("bicgstab breakdown: rhat'v is zero", it)
        alpha = rho / denom
        s = r.copy()
        s.axpy(-alpha, v)
        if s.norm() <= cfg.tol * bnorm:
            x.axpy(alpha, ph)
            it += 1
            relres = _residual(a, b, x).norm() / bnorm
            history.append(relres)
            if relres <= cfg.tol:
                return SolveResult(x, it, relres, True, history)
            r = _residual(a, b, x)
            continue
        sh = M.apply(s)
        t = a.matvec(sh)
        tt = t.dot(t)
        if tt == 0.0:
            raise SolverError("bicgstab breakdown: t is zero", it)
        omega = t.dot(s) / tt
        if omega == 0.0:
            raise SolverError("bicgstab breakdown: omega is zero", it)
        x.axpy(alpha, ph)
        x.axpy(omega, sh)
        r = s
        r.axpy(-omega, t)
        it += 1
        history.append(r.norm() / bnorm)
        if r.norm() <= cfg.tol * bnorm:
            relres = _residual(a, b, x).norm() / bnorm
            if relres <= cfg.tol:
                return SolveResult(x, it, relres, True, history)
    relres = _residual(a, b, x).norm() / bnorm
    return SolveResult(x, it, relres, relres <= cfg.tol, history)
