import logging

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import box2d, partitioned
from pfem.bc import BCSet, apply_dirichlet
from pfem.errors import ConfigError
from pfem.linalg import DistVector
from pfem.splitting import (GAUGE_DOF, SaddleSystem, SplitConfig, assemble_block_load,
                            momentum_residual, split_step, steady_stokes, time_loop)


def lid_profile(x):
    return 16.0 * x[:, 0] ** 2 * (1.0 - x[:, 0]) ** 2


def cavity_bcs(lid=True):
    bx = BCSet().add(1, 0.0).add(2, 0.0).add(3, 0.0)
    by = BCSet().add(1, 0.0).add(2, 0.0).add(3, 0.0).add(4, 0.0)
    if lid:
        bx.add(4, lid_profile)
    else:
        bx.add(4, 0.0)
    return [bx, by]


def cavity(n=4, nu=0.05, n_ranks=1, convection=False, lid=True):
    mesh = box2d(n)
    part = partitioned(mesh, n_ranks)
    return SaddleSystem(mesh, part, nu, cavity_bcs(lid),
                        include_convection=convection)


def pulse_load(sys, amp=5.0):
    def at(t):
        s = amp * np.sin(np.pi * t)

        def fn(x):
            return np.stack([s * np.sin(np.pi * x[:, 1]) * np.cos(np.pi * x[:, 0]),
                             -s * np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])],
                            axis=1)
        return assemble_block_load(fn, sys.vmap, sys.block)
    return at


def tight():
    return SplitConfig(scheme="exact-lu", c_tol=1e-12, schur_tol=1e-12)


# ---------------- dense monolithic oracle ----------------

def dense_saddle_solve(sys, u_prev, dt, load=None, gauge="pin"):
    """One unsteady Stokes step by a dense solve of [[C, G], [D, 0]]."""
    c = sys.momentum_matrix(u_prev, dt)
    f = sys.momentum_rhs(u_prev, dt, load)
    apply_dirichlet(c, f, sys.bc_dofs, sys.bc_vals)
    nv, npr = sys.block.n_global, sys.pmap.n_global
    a = np.zeros((nv + npr, nv + npr))
    a[:nv, :nv] = c.to_scipy().toarray()
    a[:nv, nv:] = sys.G.to_scipy().toarray()
    a[nv:, :nv] = sys.D.to_scipy().toarray()
    rhs = np.concatenate([f.to_global(), np.zeros(npr)])
    if gauge == "pin":
        a[nv + GAUGE_DOF, :] = 0.0
        a[nv + GAUGE_DOF, nv + GAUGE_DOF] = 1.0
        rhs[nv + GAUGE_DOF] = 0.0
        x = np.linalg.solve(a, rhs)
        return x[:nv], x[nv:]
    # mean-zero pressure via a Lagrange multiplier row/column
    aug = np.zeros((nv + npr + 1, nv + npr + 1))
    aug[:nv + npr, :nv + npr] = a
    aug[nv:nv + npr, -1] = 1.0
    aug[-1, nv:nv + npr] = 1.0
    x = np.linalg.solve(aug, np.append(rhs, 0.0))
    return x[:nv], x[nv:nv + npr]


def test_exact_lu_matches_dense_monolithic():
    sys = cavity(n=3, nu=0.1)
    assert sys.block.n_global + sys.pmap.n_global <= 300
    cfg = tight()
    dt = 0.05
    u = sys.initial_velocity()
    ud = u.to_global().copy()
    for _ in range(5):
        res = split_step(sys, cfg, u, dt)
        u_ref, p_ref = dense_saddle_solve(
            sys, DistVector.from_global(sys.block, ud), dt)
        scale = max(np.abs(u_ref).max(), 1.0)
        assert np.abs(res.u.to_global() - u_ref).max() < 1e-8 * scale
        assert np.abs(res.p.to_global() - p_ref).max() < 1e-8 * max(np.abs(p_ref).max(), 1.0)
        u, ud = res.u, u_ref


def test_pressure_gauge_only_shifts_pressure():
    sys = cavity(n=3, nu=0.05)
    u = sys.initial_velocity()
    res = split_step(sys, tight(), u, 0.1)
    u_mz, p_mz = dense_saddle_solve(sys, u, 0.1, gauge="mean-zero")
    assert np.abs(res.u.to_global() - u_mz).max() < 1e-9
    shift = res.p.to_global() - p_mz
    assert np.abs(shift - shift.mean()).max() < 1e-8
    assert abs(res.p.to_global()[GAUGE_DOF]) < 1e-12       # the pinned DoF


# ---------------- scheme relations ----------------

def diagonal_momentum(sys, dt):
    """Artificial C = (1/dt) diag(lumped velocity mass)."""
    d = sp.diags(sys.Ml_block.to_global() / dt).tocsr()
    return sys.M_block.__class__.from_scipy(sys.block, sys.block, d)


def test_perot_equals_yosida_under_diagonal_momentum():
    # with C diagonal and equal to Ml/dt the inexact factors coincide:
    # C^-1 = dt Ml^-1, so the two velocity updates apply the same operator
    # and agree away from the walls. On Dirichlet rows they differ by
    # design (Perot's update uses the raw divergence transpose, Yosida's
    # gradient rows are zeroed there), so the walls are excluded.
    sys = cavity(n=4, nu=0.05)
    dt = 0.05
    u0 = sys.initial_velocity()
    c = diagonal_momentum(sys, dt)
    out = {}
    for scheme in ("perot", "yosida"):
        cfg = SplitConfig(scheme=scheme, c_tol=1e-13, schur_tol=1e-13)
        res = split_step(sys, cfg, u0, dt, c_matrix=c.copy())
        out[scheme] = res
    du = out["perot"].u.to_global() - out["yosida"].u.to_global()
    dp = out["perot"].p.to_global() - out["yosida"].p.to_global()
    interior = np.ones(sys.block.n_global, dtype=bool)
    interior[sys.bc_dofs] = False
    assert np.abs(du[interior]).max() < 1e-9
    assert np.abs(du[~interior]).max() > 1e-3     # and the walls do differ
    assert np.abs(dp).max() < 1e-9


def test_momentum_residual_separates_schemes():
    # Yosida satisfies the momentum equation to solver accuracy and pays in
    # continuity; Perot keeps continuity and violates momentum
    sys = cavity(n=4, nu=0.05)
    dt = 0.05
    u0, _ = steady_stokes(sys)
    res_y = split_step(sys, SplitConfig(scheme="yosida"), u0, dt)
    res_p = split_step(sys, SplitConfig(scheme="perot"), u0, dt)
    mom_y = momentum_residual(sys, None, u0, res_y.u, res_y.p, dt)
    mom_p = momentum_residual(sys, None, u0, res_p.u, res_p.p, dt)
    assert mom_y < 1e-7
    assert mom_p > 100 * mom_y
    assert res_p.div_norm < 1e-9
    assert res_y.div_norm > 100 * res_p.div_norm


def test_perot_div_free_yosida_trace_exact_on_pulse():
    sys = cavity(n=6, nu=0.05, lid=False)
    load = pulse_load(sys)
    u0 = sys.initial_velocity()
    dt = 0.05
    res_p = split_step(sys, SplitConfig(scheme="perot", c_tol=1e-11, schur_tol=1e-11),
                       u0, dt, load=load(dt))
    res_y = split_step(sys, SplitConfig(scheme="yosida", c_tol=1e-11, schur_tol=1e-11),
                       u0, dt, load=load(dt))
    assert res_p.div_norm <= 10 * 1e-11 * max(res_p.u.norm(), 1.0)
    assert sys.trace_error(res_p.u) > 1e-8          # measurable wall violation
    assert sys.trace_error(res_y.u) <= 1e-11        # exact trace (algebraic zero)
    assert res_y.div_norm > res_p.div_norm


def run_final_error(sys, cfg, load, dt, n_steps, ref):
    u = sys.initial_velocity()
    t = 0.0
    for _ in range(n_steps):
        t += dt
        u = split_step(sys, cfg, u, dt, load=load(t)).u
    return np.linalg.norm(u.to_global() - ref)


def test_split_velocity_error_first_order_in_dt():
    sys = cavity(n=6, nu=0.05, lid=False)
    load = pulse_load(sys)
    t_probe = {}
    errs = {"perot": [], "yosida": []}
    for dt in (0.1, 0.05, 0.025):
        u = sys.initial_velocity()
        t = 0.0
        for _ in range(3):
            t += dt
            u = split_step(sys, tight(), u, dt, load=load(t)).u
        ref = u.to_global()
        for scheme in errs:
            cfg = SplitConfig(scheme=scheme, c_tol=1e-12, schur_tol=1e-12)
            errs[scheme].append(run_final_error(sys, cfg, load, dt, 3, ref))
    for scheme, es in errs.items():
        orders = np.log2(np.array(es[:-1]) / np.array(es[1:]))
        assert (orders > 0.9).all(), (scheme, es, orders)


def test_pressure_corrections_reduce_error():
    sys = cavity(n=5, nu=0.05, lid=False)
    load = pulse_load(sys)
    dt = 0.05
    u0 = sys.initial_velocity()
    ref = split_step(sys, tight(), u0, dt, load=load(dt))
    errs = []
    for q in (0, 1, 2):
        cfg = SplitConfig(scheme="yosida", corrections=q, c_tol=1e-12, schur_tol=1e-12)
        res = split_step(sys, cfg, u0, dt, load=load(dt))
        errs.append(np.linalg.norm(res.u.to_global() - ref.u.to_global()))
        assert len(res.delta_norms) == q
        if q == 2:
            assert res.delta_norms[1] < res.delta_norms[0]
    assert errs[1] < errs[0] and errs[2] < errs[1]


def test_unknown_scheme_rejected():
    sys = cavity(n=3)
    with pytest.raises(ConfigError):
        split_step(sys, SplitConfig(scheme="chorin"), sys.initial_velocity(), 0.1)


# ---------------- steady solve ----------------

def test_steady_stokes_divergence_free_and_nu_scaling():
    sys1 = cavity(n=5, nu=0.05)
    u1, p1 = steady_stokes(sys1)
    assert sys1.divergence_norm(u1) < 1e-9
    assert sys1.trace_error(u1) < 1e-11
    assert abs(p1.to_global()[GAUGE_DOF]) < 1e-12
    # Stokes velocity is independent of nu; pressure scales linearly
    sys4 = cavity(n=5, nu=0.2)
    u4, p4 = steady_stokes(sys4)
    assert np.abs(u4.to_global() - u1.to_global()).max() < 1e-9
    assert np.abs(p4.to_global() - 4.0 * p1.to_global()).max() < 1e-8


def test_block_load_component_sums():
    sys = cavity(n=4)
    f = assemble_block_load(lambda x: np.stack(
        [np.full(len(x), 3.0), x[:, 0]], axis=1), sys.vmap, sys.block)
    g = f.to_global()
    ns = sys.block.n_scalar
    assert g[:ns].sum() == pytest.approx(3.0, rel=1e-12)       # 3 * area
    assert g[ns:].sum() == pytest.approx(0.5, rel=1e-12)       # int x over unit square


# ---------------- time loop ----------------

def test_time_loop_zero_data_stays_zero():
    sys = cavity(n=3, lid=False)
    cfg = SplitConfig(scheme="yosida")
    out = time_loop(sys, cfg, sys.initial_velocity(), dt=0.1, t_end=0.3)
    assert out.step == 3
    assert out.u.norm() < 1e-13
    assert all(row["div_norm"] < 1e-13 for row in out.rows)


def test_time_loop_row_schema_and_clock():
    sys = cavity(n=3)
    cfg = SplitConfig(scheme="perot")
    seen = []
    out = time_loop(sys, cfg, sys.initial_velocity(), dt=0.04, t_end=0.1,
                    on_accept=lambda s, t, r: seen.append(s))
    assert [r["step"] for r in out.rows] == [1, 2, 3] == seen
    assert out.rows[-1]["t"] == pytest.approx(0.1)
    assert out.rows[-1]["dt"] == pytest.approx(0.02)     # clipped to hit t_end
    for row in out.rows:
        assert set(row) == {"step", "t", "dt", "eta", "c_iters",
                            "schur_iters", "div_norm"}


def test_time_loop_approaches_steady_state():
    sys = cavity(n=4, nu=0.1)
    cfg = SplitConfig(scheme="exact-lu")
    out = time_loop(sys, cfg, sys.initial_velocity(), dt=0.1, t_end=0.8)
    u_steady, _ = steady_stokes(sys)
    u = sys.initial_velocity()
    d_start = np.linalg.norm(u.to_global() - u_steady.to_global())
    d_final = np.linalg.norm(out.u.to_global() - u_steady.to_global())
    assert d_final < 0.2 * d_start


def test_restart_reproduces_trajectory_bitwise():
    def fresh():
        return cavity(n=4, nu=0.05)

    cfg = SplitConfig(scheme="yosida", corrections=1)
    full = time_loop(fresh(), cfg, cavity(n=4).initial_velocity(),
                     dt=0.05, t_end=0.2)

    first = time_loop(fresh(), cfg, cavity(n=4).initial_velocity(),
                      dt=0.05, t_end=0.1)
    resumed = time_loop(fresh(), cfg, first.u, dt=0.05, t_end=0.2,
                        t0=first.t, step0=first.step)
    assert np.array_equal(resumed.u.to_global(), full.u.to_global())
    assert np.array_equal(resumed.p.to_global(), full.p.to_global())
    assert [r["c_iters"] for r in full.rows[2:]] == \
        [r["c_iters"] for r in resumed.rows]


# ---------------- adaptivity ----------------

def test_adaptive_needs_corrections():
    sys = cavity(n=3)
    with pytest.raises(ConfigError):
        time_loop(sys, SplitConfig(scheme="yosida", corrections=0),
                  sys.initial_velocity(), dt=0.1, t_end=0.2, adaptive=True)


def test_adaptive_grows_dt_when_estimator_small():
    # the first correction increment recovers the (dt-flat) lumped base
    # defect; from the second on, eta tracks dt, so adaptivity needs q >= 2
    sys = cavity(n=4, nu=0.05)
    cfg = SplitConfig(scheme="yosida", corrections=2)
    out = time_loop(sys, cfg, steady_stokes(sys)[0], dt=0.01, t_end=0.2,
                    adaptive=True, adapt_tol=0.5, dt_max=0.05)
    dts = [r["dt"] for r in out.rows]
    assert max(dts) > 0.011                  # grew past the initial step
    assert max(dts) <= 0.05 + 1e-12          # respects dt_max
    assert out.forced_accepts == 0
    assert all(r["eta"] <= 0.5 for r in out.rows)


def test_adaptive_forced_accept_is_logged(caplog):
    sys = cavity(n=4, nu=0.05, lid=False)
    cfg = SplitConfig(scheme="yosida", corrections=1)
    load = pulse_load(sys, amp=5.0)
    with caplog.at_level(logging.WARNING, logger="pfem.splitting"):
        out = time_loop(sys, cfg, sys.initial_velocity(), dt=0.05, t_end=0.1,
                        adaptive=True, adapt_tol=1e-14, max_retries=1,
                        dt_min=0.02, load_fn=load)
    assert out.forced_accepts >= 1
    assert any("accepting dt" in r.getMessage() for r in caplog.records)


def test_adaptive_retry_shrinks_dt():
    sys = cavity(n=4, nu=0.05, lid=False)
    cfg = SplitConfig(scheme="yosida", corrections=2)
    load = pulse_load(sys, amp=5.0)
    loose = time_loop(sys, cfg, sys.initial_velocity(), dt=0.05, t_end=0.05,
                      adaptive=True, adapt_tol=0.5, dt_min=2e-3, load_fn=load)
    tight_run = time_loop(sys, cfg, sys.initial_velocity(), dt=0.05, t_end=0.05,
                          adaptive=True, adapt_tol=0.05, dt_min=2e-3,
                          max_retries=8, load_fn=load)
    assert loose.step == 1                   # first try already within tol
    assert tight_run.step > loose.step       # tighter tolerance, more steps
    assert min(r["dt"] for r in tight_run.rows) < min(r["dt"] for r in loose.rows)
    assert all(r["eta"] <= 0.05 for r in tight_run.rows)
    assert tight_run.forced_accepts == 0
