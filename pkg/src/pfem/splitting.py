"""Algebraic splittings of the time-discrete Navier-Stokes saddle system.

Each implicit step solves

    [ C  G ] [u]   [f]          C = M/dt + nu K + N(beta)
    [ D  0 ] [p] = [g],         D = negative divergence, G = D^T with the
                                Dirichlet velocity rows zeroed

via an inexact block LU factorization: with approximations H_L, H_U of
C^-1 and column factors G_s, G_u,

    1.  C u* = f
    2.  (D H_L G_s) p = D u* - g
    3.  u  = u* - H_U G_u p

The schemes differ only in those choices:

    exact-lu   H_L = H_U = C^-1,       G_s = G_u = G   (no splitting error)
    perot      H_L = H_U = dt Ml^-1,   G_s = G_u = D^T (raw transpose)
    yosida     H_L = dt Ml^-1, G_s = D^T;  H_U = C^-1, G_u = G

Perot's update commutes with D, so ||D u - g|| vanishes to solver accuracy
but the raw D^T touches constrained rows and perturbs the boundary trace.
Yosida's exact U-solve keeps the trace intact and leaves an O(dt)
divergence defect instead. Optional pressure-correction sweeps (yosida-q)
run a defect iteration on the true Schur complement; the norm of the last
correction, relative to ||p||, is the error estimator eta that drives the
adaptive time stepper.

The sweeps solve the consistent-mass Schur D_i M_ii^-1 D_i^T restricted to
the unconstrained velocity DoFs rather than reusing the lumped S1. The
defect operator of the sweep is I - S^-1 (D C^-1 G)/dt; with the interior
consistent mass its spectral radius shrinks like O(dt nu), so successive
increments decay and the last one measures the time error. Lumping leaves
an O(1) mass-approximation defect in that operator (measured ~0.45 on
P2 Taylor-Hood regardless of dt or mesh), which the sweeps can never
shrink; the estimator would saturate and the adaptive controller would
collapse dt to its floor. The first increment always recovers the lumped
base solve's defect and is therefore dt-flat; the second and later ones
carry the O(dt) signal, so adaptivity wants q >= 2.

On enclosed flows only the exact-LU Schur operator D C^-1 G is singular
(G annihilates constants because every Dirichlet row is zeroed), so the
gauge, pinning global pressure DoF 0 by row replacement, lives inside that
operator alone. The lumped Schur D Ml^-1 D^T built from the raw transpose
keeps the boundary-flux terms of the divergence rows and is SPD
nonsingular; gauging it would change the solution and break Perot's exact
mass conservation, so it is solved as assembled.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import (assemble_lumped_mass, assemble_matrix, assemble_vector,
                       build_graph, coefficient, ddx, dot, fe_vector_function,
                       grad, test, trial)
from .bc import apply_dirichlet, resolve_dirichlet, zero_rows
from .errors import ConfigError, SolverError
from .fespace import BlockMap, LagrangeElement, build_dofmap
from .linalg import DistMatrix, DistVector, SolverConfig, build_schwarz, solve

log = logging.getLogger("pfem.splitting")

GAUGE_DOF = 0  # global pressure DoF pinned to zero


def block_expand(a_scalar, block):
    """Component-major block-diagonal expansion of a scalar operator."""
    s = a_scalar.to_scipy()
    g = sp.block_diag([s] * block.ncomp, format="csr")
    return DistMatrix.from_scipy(block, block, g)


def velocity_dirichlet(vmap, block, bc_sets):
    """Resolve one BCSet per velocity component into block DoFs/values."""
    if len(bc_sets) != block.ncomp:
        raise ConfigError(f"need {block.ncomp} boundary condition sets, "
                          f"one per velocity component")
    dofs, vals = [], []
    for c, bs in enumerate(bc_sets):
        d, v = resolve_dirichlet(bs, vmap)
        dofs.append(block.component_indices(c, d))
        vals.append(v)
    dofs = np.concatenate(dofs)
    vals = np.concatenate(vals)
    order = np.argsort(dofs)
    return dofs[order], vals[order]


def assemble_block_load(fn, vmap, block, workers=None):
    """Component loads int F_c v for a vector field fn((n, dim)) -> (n, dim)."""
    parts_per_comp = []
    for c in range(block.ncomp):
        fc = coefficient(lambda x, c=c: np.asarray(fn(x))[:, c])
        parts_per_comp.append(assemble_vector(fc * test(), vmap, workers=workers))
    parts = []
    for r in range(block.n_ranks):
        parts.append(np.concatenate([v.parts[r] for v in parts_per_comp]))
    return DistVector(block, parts, "unique")


class SaddleSystem:
    """Static pieces of the saddle problem on one mesh/partition.

    Holds the scalar mass and stiffness (sharing one graph so the momentum
    matrix is rebuilt by data arithmetic), the divergence block and its raw
    transpose, the zeroed-row gradient, the lumped velocity mass, and the
    resolved velocity Dirichlet data.
    """

    def __init__(self, mesh, partition, nu, bc_sets, vel_degree=2,
                 include_convection=True, workers=None):
        self.mesh = mesh
        self.partition = partition
        self.nu = float(nu)
        self.include_convection = include_convection
        self.workers = workers

        self.vmap = build_dofmap(mesh, partition, LagrangeElement(mesh.dim, vel_degree))
        self.pmap = build_dofmap(mesh, partition, LagrangeElement(mesh.dim, 1))
        self.block = BlockMap(self.vmap, mesh.dim)

        self.graph_v = build_graph(self.vmap)
        self.M = assemble_matrix(trial() * test(), self.vmap,
                                 graph=self.graph_v, workers=workers)
        self.K = assemble_matrix(dot(grad(trial()), grad(test())), self.vmap,
                                 graph=self.graph_v, workers=workers)
        self.M_block = block_expand(self.M, self.block)

        ml = assemble_lumped_mass(self.vmap, workers=workers)
        self.Ml_block = DistVector(
            self.block,
            [np.concatenate([p] * self.block.ncomp) for p in ml.parts], "unique")

        self.bc_dofs, self.bc_vals = velocity_dirichlet(self.vmap, self.block, bc_sets)

        # negative divergence, rows in the pressure space
        dcols = []
        for c in range(mesh.dim):
            dc = assemble_matrix(coefficient(-1.0) * ddx(trial(), c) * test(),
                                 self.pmap, self.vmap, workers=workers)
            dcols.append(dc.to_scipy())
        d_sp = sp.hstack(dcols, format="csr")
        self.D = DistMatrix.from_scipy(self.pmap, self.block, d_sp)
        self.Dt_raw = self.D.transpose()
        self.G = self.Dt_raw.copy()
        zero_rows(self.G, self.bc_dofs)

        # dt-independent lumped Schur complement S1 = D Ml^-1 D^T; the
        # dt-dependent operator is S(dt) = dt * S1. Built from the raw
        # transpose, S1 is SPD and nonsingular (the constrained rows keep
        # their boundary flux terms, so constants are not in its kernel)
        # and needs no gauge; pinning it would break the conservation
        # identity D u = D u* - S(dt) p.
        w = 1.0 / self.Ml_block.to_global()
        s1 = (d_sp @ sp.diags(w) @ self.Dt_raw.to_scipy()).tocsr()
        s1.sort_indices()
        self.S1 = DistMatrix.from_scipy(self.pmap, self.pmap, s1)
        self._s1_pc = None
        self._corr_schur = None
        self._gauge_rank = int(self.pmap.dof_owner[GAUGE_DOF])
        self._gauge_pos = int(np.searchsorted(
            self.pmap.unique_maps[self._gauge_rank], GAUGE_DOF))

    def momentum_matrix(self, u_prev, dt):
        """C = M/dt + nu K (+ N(u_prev)), Dirichlet rows replaced."""
        terms = [(1.0 / dt, self.M), (self.nu, self.K)]
        if self.include_convection:
            beta = fe_vector_function(self.vmap, self.block.ncomp, u_prev)
            n = assemble_matrix(dot(beta, grad(trial())) * test(), self.vmap,
                                graph=self.graph_v, workers=self.workers)
            terms.append((1.0, n))
        c_scalar = DistMatrix.combine(terms)
        c = block_expand(c_scalar, self.block)
        return c

    def momentum_rhs(self, u_prev, dt, load=None):
        """f = M u_prev / dt (+ load); Dirichlet rows are set by apply_dirichlet."""
        f = self.M_block.matvec(u_prev, self.workers)
        f.scale(1.0 / dt)
        if load is not None:
            f.axpy(1.0, load)
        return f

    def pin_gauge(self, vec):
        vec.parts[self._gauge_rank][self._gauge_pos] = 0.0
        return vec

    def initial_velocity(self, fn=None):
        """Zero (or interpolated) field with the Dirichlet trace imposed."""
        if fn is None:
            g = np.zeros(self.block.n_global)
        else:
            pts = self.vmap.dof_points
            vals = np.asarray(fn(pts))
            g = np.concatenate([vals[:, c] for c in range(self.block.ncomp)])
        g[self.bc_dofs] = self.bc_vals
        return DistVector.from_global(self.block, g)

    def schur_pc(self, cfg):
        if self._s1_pc is None:
            self._s1_pc = build_schwarz(self.S1, overlap=cfg.pc_overlap,
                                        subdomain_solver=cfg.subdomain_solver,
                                        workers=cfg.workers)
        return self._s1_pc

    def correction_schur(self):
        if self._corr_schur is None:
            self._corr_schur = _CorrectionSchur(self)
        return self._corr_schur

    def trace_error(self, u):
        """Max violation of the velocity Dirichlet data."""
        g = u.to_global()
        if len(self.bc_dofs) == 0:
            return 0.0
        return float(np.abs(g[self.bc_dofs] - self.bc_vals).max())

    def divergence_norm(self, u):
        return self.D.matvec(u, self.workers).norm()


def steady_stokes(sys):
    """Discrete steady Stokes solution of the system's blocks, by a direct
    sparse solve of the gauged monolithic matrix. Used for warm starts and
    as a reference state; the splittings are asymptotically accurate only
    for dt * nu / h^2 below O(1), and starting from rest slams them with an
    impulsive O(1/dt) startup pressure, so smooth studies start here."""
    import scipy.sparse.linalg as spla
    kb = block_expand(DistMatrix.combine([(sys.nu, sys.K)]), sys.block)
    f = DistVector.zeros(sys.block)
    apply_dirichlet(kb, f, sys.bc_dofs, sys.bc_vals)
    nv = sys.block.n_global
    a = sp.bmat([[kb.to_scipy(), sys.G.to_scipy()],
                 [sys.D.to_scipy(), None]], format="lil")
    a[nv + GAUGE_DOF, :] = 0.0
    a[nv + GAUGE_DOF, nv + GAUGE_DOF] = 1.0
    rhs = np.concatenate([f.to_global(), np.zeros(sys.pmap.n_global)])
    x = spla.splu(a.tocsc()).solve(rhs)
    return (DistVector.from_global(sys.block, x[:nv]),
            DistVector.from_global(sys.pmap, x[nv:]))


@dataclass
class SplitConfig:
    scheme: str = "yosida"          # exact-lu | perot | yosida
    corrections: int = 0            # extra pressure sweeps (yosida-q)
    c_tol: float = 1e-10
    c_max_iters: int = 2000
    c_restart: int = 80
    schur_tol: float = 1e-10
    schur_max_iters: int = 2000
    pc_overlap: int = 1
    subdomain_solver: str = "sparse-lu"
    workers: int = None


@dataclass
class StepResult:
    u: DistVector
    p: DistVector
    c_iters: int
    schur_iters: int
    delta_norms: list
    div_norm: float
    eta: float


class _CorrectionSchur:
    """Matrix-free consistent-mass Schur D_i M_ii^-1 D_i^T over the
    unconstrained velocity DoFs, gauge row replaced by dp_0 = 0.

    C^-1 applied to a vector that vanishes on Dirichlet rows returns the
    interior-block solve, so the mass approximation must be restricted the
    same way: interior block of the consistent mass, not zeroed rows of a
    full-mass inverse. G annihilates constants on enclosed flows (all
    divergence boundary-flux rows are constrained), hence the gauge."""

    def __init__(self, sys):
        import scipy.sparse.linalg as spla
        self.sys = sys
        self.row_map = sys.pmap
        n = sys.block.n_global
        self.interior = np.setdiff1d(np.arange(n), sys.bc_dofs)
        m = sp.block_diag([sys.M.to_scipy()] * sys.block.ncomp, format="csr")
        self._lu = spla.splu(m[self.interior][:, self.interior].tocsc())

    def matvec(self, p, workers=None):
        sys = self.sys
        w = sys.G.matvec(p, sys.workers)
        wg = w.to_global()
        zg = np.zeros(wg.size)
        zg[self.interior] = self._lu.solve(wg[self.interior])
        y = sys.D.matvec(DistVector.from_global(sys.block, zg), sys.workers)
        r, pos = sys._gauge_rank, sys._gauge_pos
        y.parts[r][pos] = p.parts[r][pos]
        return y


class _SchurOperator:
    """Matrix-free exact Schur complement D C^-1 G with the gauge row
    replaced by p_0 = 0."""

    def __init__(self, sys, c_solve):
        self.sys = sys
        self.c_solve = c_solve
        self.row_map = sys.pmap

    def matvec(self, p, workers=None):
        w = self.sys.G.matvec(p, self.sys.workers)
        z = self.c_solve(w)
        y = self.sys.D.matvec(z, self.sys.workers)
        r, pos = self.sys._gauge_rank, self.sys._gauge_pos
        y.parts[r][pos] = p.parts[r][pos]
        return y


def _checked(result, what):
    if not result.converged:
        raise SolverError(f"{what} solve stalled at relative residual "
                          f"{result.relres:.3e} after {result.iterations} iterations",
                          result.iterations, result.relres)
    return result


def split_step(sys, cfg, u_prev, dt, load=None, c_matrix=None, c_pc=None):
    """One implicit step of the chosen splitting. Returns a StepResult.

    c_matrix/c_pc allow reusing a momentum matrix and preconditioner when
    the caller knows they are still valid (fixed dt, Stokes).
    """
    c = sys.momentum_matrix(u_prev, dt) if c_matrix is None else c_matrix
    f = sys.momentum_rhs(u_prev, dt, load)
    apply_dirichlet(c, f, sys.bc_dofs, sys.bc_vals)

    c_sym = not sys.include_convection
    c_cfg = SolverConfig(method="cg" if c_sym else "gmres", tol=cfg.c_tol,
                         max_iters=cfg.c_max_iters, restart=cfg.c_restart,
                         workers=cfg.workers)
    if c_pc is None:
        c_pc = build_schwarz(c, overlap=cfg.pc_overlap,
                             subdomain_solver=cfg.subdomain_solver,
                             workers=cfg.workers)
    c_iters = [0]

    def c_solve(rhs, x0=None):
        res = _checked(solve(c, rhs, c_cfg, x0=x0, preconditioner=c_pc),
                       "momentum")
        c_iters[0] += res.iterations
        return res.x

    u_star = c_solve(f)
    rhs = sys.D.matvec(u_star, sys.workers)
    schur_iters = 0
    delta_norms = []

    if cfg.scheme == "exact-lu":
        # the exact Schur D C^-1 G annihilates constant pressures (every
        # constrained row of G is zeroed), so pin the gauge DoF here
        sys.pin_gauge(rhs)
        op = _SchurOperator(sys, c_solve)
        s_cfg = SolverConfig(method="gmres", tol=cfg.schur_tol,
                             max_iters=cfg.schur_max_iters, restart=cfg.c_restart,
                             workers=cfg.workers)
        res = _checked(solve(op, rhs, s_cfg), "pressure (exact Schur)")
        p = res.x
        schur_iters += res.iterations
        u = u_star.copy()
        u.axpy(-1.0, c_solve(sys.G.matvec(p, sys.workers)))
    elif cfg.scheme in ("perot", "yosida"):
        s_cfg = SolverConfig(method="cg", tol=cfg.schur_tol,
                             max_iters=cfg.schur_max_iters, workers=cfg.workers)
        s_pc = sys.schur_pc(cfg)
        # S(dt) = dt * S1, so solve S1 p = rhs / dt with the cached factors
        res = _checked(solve(sys.S1, rhs.copy().scale(1.0 / dt), s_cfg,
                             preconditioner=s_pc), "pressure (lumped Schur)")
        p = res.x
        schur_iters += res.iterations
        u = u_star.copy()
        if cfg.scheme == "perot":
            w = sys.Dt_raw.matvec(p, sys.workers)
            for wp, mp in zip(w.parts, sys.Ml_block.parts):
                wp /= mp
            u.axpy(-dt, w)
        else:
            u.axpy(-1.0, c_solve(sys.G.matvec(p, sys.workers)))
        n_corr = cfg.corrections if cfg.scheme == "yosida" else 0
        if n_corr > 0:
            sc_op = sys.correction_schur()
            sc_cfg = SolverConfig(method="gmres", tol=cfg.schur_tol,
                                  max_iters=cfg.schur_max_iters,
                                  restart=cfg.c_restart, workers=cfg.workers)
        for _ in range(n_corr):
            r_div = sys.D.matvec(u, sys.workers)
            rhs_c = sys.pin_gauge(r_div.copy().scale(1.0 / dt))
            res = _checked(solve(sc_op, rhs_c, sc_cfg), "pressure correction")
            dp = res.x
            schur_iters += res.iterations
            delta_norms.append(dp.norm())
            p.axpy(1.0, dp)
            u.axpy(-1.0, c_solve(sys.G.matvec(dp, sys.workers)))
    else:
        raise ConfigError(f"unknown splitting scheme {cfg.scheme!r}")

    div_norm = sys.divergence_norm(u)
    pn = p.norm()
    eta = delta_norms[-1] / pn if delta_norms and pn > 0.0 else 0.0
    return StepResult(u, p, c_iters[0], schur_iters, delta_norms, div_norm, eta)


def momentum_residual(sys, cfg, u_prev, u, p, dt, load=None):
    """Relative residual ||C u + G p - f|| / ||f|| of the momentum equation,
    measured on the non-Dirichlet rows of the step that produced (u, p)."""
    c = sys.momentum_matrix(u_prev, dt)
    f = sys.momentum_rhs(u_prev, dt, load)
    apply_dirichlet(c, f, sys.bc_dofs, sys.bc_vals)
    r = c.matvec(u, sys.workers)
    r.axpy(1.0, sys.G.matvec(p, sys.workers))
    r.axpy(-1.0, f)
    rg = r.to_global()
    rg[sys.bc_dofs] = 0.0
    fg = f.to_global()
    fg[sys.bc_dofs] = 0.0
    return float(np.linalg.norm(rg) / max(np.linalg.norm(fg), 1e-300))


# ===================== time loop =====================

@dataclass
class TimeLoopResult:
    rows: list
    u: DistVector
    p: DistVector
    t: float
    step: int
    dt_next: float
    forced_accepts: int = 0


def time_loop(sys, cfg, u0, dt, t_end, t0=0.0, step0=0,
              adaptive=False, adapt_tol=1e-3, dt_min=None, dt_max=None,
              safety=0.9, max_retries=5, load_fn=None, on_accept=None):
    """March the splitting from (t0, u0) to t_end.

    Adaptive mode asks for corrections >= 1 and uses eta = ||dp_last||/||p||:
    a step with eta > adapt_tol is retried with a smaller dt (at most
    max_retries times, then accepted with a logged warning), and the next
    dt is 0.9 dt (adapt_tol/eta)^(1/2) clamped to [dt_min, dt_max].

    Rows collect (step, t, dt, eta, c_iters, schur_iters, div_norm) for
    accepted steps only. on_accept(step, t, result) runs after each accept.
    """
    if adaptive and cfg.corrections < 1:
        raise ConfigError("adaptive stepping needs corrections >= 1 for its estimator")
    dt_min = dt * 1e-3 if dt_min is None else dt_min
    dt_max = dt * 1e2 if dt_max is None else dt_max

    rows = []
    u = u0.copy()
    p = None
    t = t0
    step = step0
    dt_next = dt
    forced = 0
    c_cache = {}   # dt -> (C, preconditioner); valid only without convection
    eps = 1e-12 * max(t_end, 1.0)
    while t < t_end - eps:
        dt_try = min(dt_next, t_end - t)
        result = None
        for attempt in range(max_retries + 1):
            c_matrix = c_pc = None
            if not sys.include_convection:
                if dt_try not in c_cache:
                    cm = sys.momentum_matrix(u, dt_try)
                    apply_dirichlet(cm, None, sys.bc_dofs, sys.bc_vals)
                    pc = build_schwarz(cm, overlap=cfg.pc_overlap,
                                       subdomain_solver=cfg.subdomain_solver,
                                       workers=cfg.workers)
                    c_cache[dt_try] = (cm, pc)
                c_matrix, c_pc = c_cache[dt_try]
            load = load_fn(t + dt_try) if load_fn is not None else None
            result = split_step(sys, cfg, u, dt_try, load=load,
                                c_matrix=c_matrix, c_pc=c_pc)
            if not adaptive or result.eta <= adapt_tol:
                break
            if attempt == max_retries:
                forced += 1
                log.warning("step %d: accepting dt=%.3e with eta=%.3e > %.1e "
                            "after %d retries", step + 1, dt_try, result.eta,
                            adapt_tol, max_retries)
                break
            dt_try = float(np.clip(safety * dt_try * np.sqrt(adapt_tol / result.eta),
                                   dt_min, dt_try * 0.5))
        u, p = result.u, result.p
        t += dt_try
        step += 1
        rows.append({"step": step, "t": t, "dt": dt_try, "eta": result.eta,
                     "c_iters": result.c_iters, "schur_iters": result.schur_iters,
                     "div_norm": result.div_norm})
        if adaptive and result.eta > 0.0:
            dt_next = float(np.clip(safety * dt_try * np.sqrt(adapt_tol / result.eta),
                                    dt_min, dt_max))
        else:
            dt_next = dt_try if adaptive else dt
        if on_accept is not None:
            on_accept(step, t, result)
    return TimeLoopResult(rows, u, p, t, step, dt_next, forced)
