"""Problem drivers behind the CLI subcommands and the demo scripts.

Each driver reads its setup from a ParamTree, composes the library layers
(mesh -> partition -> spaces -> assembly -> solve -> output) and returns
plain data; printing is left to the caller. Recognized sections:

    [mesh]       dim, n, bounds
    [partition]  ranks, halo, seed
    [problem]    degree, kappa | nu, kind, convection, lid_speed, pulse_amp
    [solver]     method, tol, max_iters, restart, preconditioner, overlap,
                 subdomain_solver, workers
    [time]       dt, t_end, corrections, tol, dt_min, dt_max
    [output]     vtk, csv, checkpoint, vtk_every, prefix
"""

import csv
import time as _time

import numpy as np

from .assembly import (assemble_matrix, assemble_vector, boundary, coefficient,
                       dot, grad, integrate_error, test, trial)
from .bc import BCSet, apply_dirichlet, resolve_dirichlet
from .checkpoint import write_checkpoint
from .errors import ConfigError, SolverError
from .fespace import LagrangeElement, build_dofmap
from .linalg import SolverConfig, build_schwarz, solve
from .mesh import BoxSpec, generate_box
from .partition import add_halo, build_dual_graph, partition_greedy
from .splitting import (SaddleSystem, SplitConfig, assemble_block_load,
                        steady_stokes, time_loop)
from .vtkio import write_vtk

STATS_HEADER = ["step", "t", "dt", "eta", "c_iters", "schur_iters", "div_norm"]


def write_stats_csv(path, rows):
    """Per-step statistics, one row per accepted step, fixed column set."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(STATS_HEADER)
        for r in rows:
            w.writerow([r["step"], f"{r['t']:.16e}", f"{r['dt']:.16e}",
                        f"{r['eta']:.16e}", r["c_iters"], r["schur_iters"],
                        f"{r['div_norm']:.16e}"])


def write_rows_csv(path, header, rows):
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[k] for k in header])


# -- param plumbing -------------------------------------------------------

def box_from_params(params, n_override=None):
    dim = params.get_int("mesh.dim", 2)
    if dim not in (2, 3):
        raise ConfigError(f"mesh.dim must be 2 or 3, got {dim}")
    n = [n_override] if n_override else params.get_ints("mesh.n", [8])
    if len(n) == 1:
        n = n * dim
    if len(n) != dim:
        raise ConfigError(f"mesh.n needs 1 or {dim} entries, got {len(n)}")
    flat = params.get_floats("mesh.bounds", [0.0, 1.0] * dim)
    if len(flat) != 2 * dim:
        raise ConfigError(f"mesh.bounds needs {2 * dim} entries, got {len(flat)}")
    bounds = tuple((flat[2 * c], flat[2 * c + 1]) for c in range(dim))
    return generate_box(BoxSpec(bounds=bounds, subdivisions=tuple(n)))


def partition_from_params(mesh, params, ranks=None):
    n_ranks = ranks if ranks is not None else params.get_int("partition.ranks", 2)
    halo = params.get_int("partition.halo", 1)
    seed = params.get_int("partition.seed", 0)
    graph = build_dual_graph(mesh)
    part = partition_greedy(graph, n_ranks, seed=seed)
    if halo > 0:
        part = add_halo(part, graph, halo)
    return part


def solver_from_params(params, default_tol=1e-10):
    return SolverConfig(
        method=params.get_str("solver.method", "cg"),
        tol=params.get_float("solver.tol", default_tol),
        max_iters=params.get_int("solver.max_iters", 1000),
        restart=params.get_int("solver.restart", 50),
        preconditioner=params.get_str("solver.preconditioner", "schwarz"),
        overlap=params.get_int("solver.overlap", 1),
        subdomain_solver=params.get_str("solver.subdomain_solver", "sparse-lu"),
        workers=_workers(params),
    )


def _workers(params):
    w = params.get_int("solver.workers", 0)
    return w if w > 0 else None


# -- Poisson --------------------------------------------------------------

def poisson_manufactured(dim, kappa):
    """u = prod_c sin(pi x_c); returns (u, grad u, f, Neumann flux on the
    last coordinate's max side)."""
    def u_exact(x):
        v = np.sin(np.pi * x[:, 0])
        for c in range(1, dim):
            v = v * np.sin(np.pi * x[:, c])
        return v

    def grad_exact(x):
        cols = []
        for c in range(dim):
            g = np.pi * np.cos(np.pi * x[:, c])
            for k in range(dim):
                if k != c:
                    g = g * np.sin(np.pi * x[:, k])
            cols.append(g)
        return np.stack(cols, axis=1)

    def f(x):
        return kappa * dim * np.pi ** 2 * u_exact(x)

    def g_neumann(x):
        return kappa * grad_exact(x)[:, dim - 1]

    return u_exact, grad_exact, f, g_neumann


def solve_poisson(mesh, partition, degree, kappa, cfg, preconditioner=None):
    """One manufactured-solution solve. Dirichlet on markers 1..2d-1,
    Neumann on marker 2d. Returns (u, dofmap, SolveResult, (l2, h1))."""
    dm = build_dofmap(mesh, partition, LagrangeElement(mesh.dim, degree))
    u_exact, grad_exact, f, g_n = poisson_manufactured(mesh.dim, kappa)

    a = assemble_matrix(coefficient(kappa) * dot(grad(trial()), grad(test())),
                        dm, workers=cfg.workers)
    rhs = coefficient(f) * test() + boundary(coefficient(g_n) * test(), 2 * mesh.dim)
    b = assemble_vector(rhs, dm, workers=cfg.workers)

    bcs = BCSet()
    for marker in range(1, 2 * mesh.dim):
        bcs.add(marker, u_exact)
    dofs, vals = resolve_dirichlet(bcs, dm)
    apply_dirichlet(a, b, dofs, vals)

    res = solve(a, b, cfg, preconditioner=preconditioner)
    if not res.converged:
        raise SolverError(
            f"poisson solve stalled at relative residual {res.relres:.3e} "
            f"after {res.iterations} iterations", res.iterations, res.relres)
    errs = integrate_error(res.x, u_exact, dm, grad_exact=grad_exact,
                           workers=cfg.workers)
    return res.x, dm, res, errs


def run_poisson(params, ranks=None, convergence=0):
    """Single solve, or a refinement study when convergence = #levels > 1.

    Returns {"rows": [...], "u": vec, "dofmap": dm, "result": SolveResult};
    each row has n, h, dofs, l2, h1, l2_order, h1_order, iterations.
    """
    degree = params.get_int("problem.degree", 1)
    if degree not in (1, 2):
        raise ConfigError(f"problem.degree must be 1 or 2, got {degree}")
    kappa = params.get_float("problem.kappa", 1.0)
    cfg = solver_from_params(params)
    n0 = params.get_ints("mesh.n", [8])[0]
    levels = max(1, int(convergence))

    rows, u, dm, res = [], None, None, None
    for lvl in range(levels):
        n = n0 * 2 ** lvl
        mesh = box_from_params(params, n_override=n)
        part = partition_from_params(mesh, params, ranks=ranks)
        u, dm, res, (l2, h1) = solve_poisson(mesh, part, degree, kappa, cfg)
        h = float(np.max(mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)) / n)
        rows.append({"n": n, "h": h, "dofs": dm.n_global, "l2": l2,
                     "h1": h1, "iterations": res.iterations,
                     "l2_order": float("nan"), "h1_order": float("nan")})
        if lvl > 0:
            prev = rows[-2]
            rows[-1]["l2_order"] = np.log2(prev["l2"] / l2)
            rows[-1]["h1_order"] = np.log2(prev["h1"] / h1)

    out = params.get_str("output.vtk", "")
    if out:
        write_vtk(dm.mesh, {"u": u}, out)
    return {"rows": rows, "u": u, "dofmap": dm, "result": res}


# -- Navier-Stokes --------------------------------------------------------

def _regularized_lid(speed):
    def lid(x):
        return speed * 16.0 * x[:, 0] ** 2 * (1.0 - x[:, 0]) ** 2
    return lid


def pulse_forcing(amp):
    """Smooth solenoidal body force ramping as sin(pi t)."""
    def at(t):
        s = amp * np.sin(np.pi * t)

        def fn(x):
            return np.stack([s * np.sin(np.pi * x[:, 1]) * np.cos(np.pi * x[:, 0]),
                             -s * np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])],
                            axis=1)
        return fn
    return at


def build_cavity(params, ranks=None):
    """SaddleSystem for the square cavity; problem.kind picks the drive:
    'lid' (regularized moving top wall) or 'pulse' (body force, no-slip)."""
    mesh = box_from_params(params)
    if mesh.dim != 2:
        raise ConfigError("the ns driver runs the 2D cavity (mesh.dim = 2)")
    part = partition_from_params(mesh, params, ranks=ranks)
    nu = params.get_float("problem.nu", 0.05)
    kind = params.get_str("problem.kind", "lid")
    if kind not in ("lid", "pulse"):
        raise ConfigError(f"problem.kind must be 'lid' or 'pulse', got '{kind}'")
    bx = BCSet().add(1, 0.0).add(2, 0.0).add(3, 0.0)
    by = BCSet().add(1, 0.0).add(2, 0.0).add(3, 0.0).add(4, 0.0)
    if kind == "lid":
        bx.add(4, _regularized_lid(params.get_float("problem.lid_speed", 1.0)))
    else:
        bx.add(4, 0.0)
    sys = SaddleSystem(mesh, part, nu=nu, bc_sets=[bx, by],
                       include_convection=params.get_bool("problem.convection", True),
                       workers=_workers(params))
    load_fn = None
    if kind == "pulse":
        amp = params.get_float("problem.pulse_amp", 5.0)
        at = pulse_forcing(amp)
        load_fn = lambda t: assemble_block_load(at(t), sys.vmap, sys.block,
                                                workers=sys.workers)
    return sys, load_fn


_SCHEMES = {"exact-lu": ("exact-lu", 0), "perot": ("perot", 0),
            "yosida": ("yosida", 0), "yosida2": ("yosida", 2)}


def run_ns(params, scheme="yosida", adaptive=False, ranks=None):
    """Time-march the cavity; emits CSV, optional VTK snapshots and a final
    checkpoint. Returns the TimeLoopResult."""
    if scheme not in _SCHEMES:
        raise ConfigError(f"unknown scheme '{scheme}' "
                          f"(choose from {sorted(_SCHEMES)})")
    name, corrections = _SCHEMES[scheme]
    corrections = params.get_int("time.corrections", corrections)
    if adaptive:
        # the first correction increment recovers the dt-flat defect of the
        # lumped base solve; only the second and later carry the dt signal
        corrections = max(2, corrections)

    sys, load_fn = build_cavity(params, ranks=ranks)
    cfg = SplitConfig(
        scheme=name, corrections=corrections,
        c_tol=params.get_float("solver.tol", 1e-10),
        c_max_iters=params.get_int("solver.max_iters", 2000),
        c_restart=params.get_int("solver.restart", 80),
        schur_tol=params.get_float("solver.schur_tol", 1e-10),
        schur_max_iters=params.get_int("solver.schur_max_iters", 2000),
        pc_overlap=params.get_int("solver.overlap", 1),
        subdomain_solver=params.get_str("solver.subdomain_solver", "sparse-lu"),
        workers=_workers(params),
    )
    dt = params.get_float("time.dt", 0.05)
    t_end = params.get_float("time.t_end", 0.5)

    if params.get_bool("problem.warm_start", False):
        if sys.include_convection:
            raise ConfigError("warm_start needs problem.convection = false")
        u0, _ = steady_stokes(sys)
    else:
        u0 = sys.initial_velocity()

    prefix = params.get_str("output.prefix", "ns")
    vtk_every = params.get_int("output.vtk_every", 0)
    on_accept = None
    if vtk_every > 0:
        def on_accept(step, t, result):
            if step % vtk_every == 0:
                write_vtk(sys.mesh, {"velocity": result.u, "pressure": result.p},
                          f"{prefix}_{step:06d}.vtk")

    result = time_loop(sys, cfg, u0, dt, t_end,
                       adaptive=adaptive,
                       adapt_tol=params.get_float("time.tol", 1e-3),
                       dt_min=params.get_float("time.dt_min", 0.0) or None,
                       dt_max=params.get_float("time.dt_max", 0.0) or None,
                       load_fn=load_fn, on_accept=on_accept)

    write_stats_csv(params.get_str("output.csv", f"{prefix}_stats.csv"), result.rows)
    ckpt = params.get_str("output.checkpoint", "")
    if ckpt:
        write_checkpoint(ckpt, result.step, result.t, result.dt_next,
                         result.u.to_global(), result.p.to_global(), scheme=scheme)
    out = params.get_str("output.vtk", "")
    if out:
        write_vtk(sys.mesh, {"velocity": result.u, "pressure": result.p}, out)
    return result


# -- scaling bench --------------------------------------------------------

def run_bench_scaling(params, ranks_list):
    """Fixed Poisson problem, varying subdomain count. Returns rows of
    (n_sub, dofs, iterations, factor_seconds, solve_seconds); factor time
    is the largest per-subdomain factorization, the serial-bottleneck proxy."""
    if not ranks_list:
        raise ConfigError("bench-scaling needs a non-empty ranks list")
    degree = params.get_int("problem.degree", 2)
    kappa = params.get_float("problem.kappa", 1.0)
    cfg = solver_from_params(params, default_tol=1e-8)
    mesh = box_from_params(params)
    u_exact, _grad, f, g_n = poisson_manufactured(mesh.dim, kappa)
    rows = []
    for n_sub in ranks_list:
        part = partition_from_params(mesh, params, ranks=n_sub)
        dm = build_dofmap(mesh, part, LagrangeElement(mesh.dim, degree))
        a = assemble_matrix(coefficient(kappa) * dot(grad(trial()), grad(test())),
                            dm, workers=cfg.workers)
        rhs = coefficient(f) * test() + boundary(coefficient(g_n) * test(), 2 * mesh.dim)
        b = assemble_vector(rhs, dm, workers=cfg.workers)
        bcs = BCSet()
        for marker in range(1, 2 * mesh.dim):
            bcs.add(marker, u_exact)
        dofs, vals = resolve_dirichlet(bcs, dm)
        apply_dirichlet(a, b, dofs, vals)

        pc = build_schwarz(a, overlap=cfg.overlap,
                           subdomain_solver=cfg.subdomain_solver, workers=cfg.workers)
        t0 = _time.perf_counter()
        res = solve(a, b, cfg, preconditioner=pc)
        elapsed = _time.perf_counter() - t0
        rows.append({"n_sub": n_sub, "dofs": dm.n_global,
                     "iterations": res.iterations,
                     "factor_seconds": max(pc.factor_seconds),
                     "solve_seconds": elapsed})
    out = params.get_str("output.csv", "")
    if out:
        write_rows_csv(out, ["n_sub", "dofs", "iterations", "factor_seconds",
                             "solve_seconds"], rows)
    return rows


# -- partition info -------------------------------------------------------

def run_partition_info(params, ranks=None):
    """Per-rank cell/DoF/halo/interface counts for the configured mesh."""
    mesh = box_from_params(params)
    part = partition_from_params(mesh, params, ranks=ranks)
    degree = params.get_int("problem.degree", 1)
    dm = build_dofmap(mesh, part, LagrangeElement(mesh.dim, degree))

    membership = np.zeros(dm.n_global, dtype=np.int64)
    for r in range(part.n_ranks):
        membership[dm.repeated_maps[r]] += 1

    rows = []
    for r in range(part.n_ranks):
        owned = dm.unique_maps[r]
        rows.append({
            "rank": r,
            "owned_cells": int(np.sum(part.owner == r)),
            "local_cells": len(part.local[r]),
            "halo_cells": len(part.local[r]) - int(np.sum(part.owner == r)),
            "owned_dofs": len(owned),
            "repeated_dofs": len(dm.repeated_maps[r]),
            "interface_dofs": int(np.sum(membership[owned] > 1)),
        })
    return rows
