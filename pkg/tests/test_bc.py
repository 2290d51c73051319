import numpy as np
import pytest

from conftest import box2d, box3d, dense, dofmap_on
from pfem.assembly import (assemble_matrix, assemble_vector, coefficient, dot,
                           grad, trial)
from pfem.assembly import test as v_
from pfem.bc import BCSet, apply_dirichlet, resolve_dirichlet
from pfem.errors import ConfigError
from pfem.linalg import DistVector, SolverConfig, solve


def poisson_system(mesh, degree=1, n_ranks=1, f=1.0):
    dm = dofmap_on(mesh, n_ranks=n_ranks, degree=degree)
    a = assemble_matrix(dot(grad(trial()), grad(v_())), dm)
    b = assemble_vector(coefficient(f) * v_(), dm)
    return dm, a, b


# ---------------- resolution ----------------

def test_cube_face_dof_count_p1():
    n = (2, 3, 4)
    m = box3d(n)
    dm = dofmap_on(m, degree=1)
    bc = BCSet().add(1, 0.0)                       # x = min face
    dofs, vals = resolve_dirichlet(bc, dm)
    assert len(dofs) == (n[1] + 1) * (n[2] + 1)
    assert np.allclose(dm.dof_points[dofs][:, 0], 0.0)
    assert np.array_equal(dofs, np.sort(dofs))


def test_constant_value_broadcast():
    m = box2d(3)
    dm = dofmap_on(m, degree=1)
    dofs, vals = resolve_dirichlet(BCSet().add(3, 5.0), dm)
    assert np.allclose(vals, 5.0)
    assert len(dofs) == 4


def test_p2_edge_dofs_resolved_with_function_values():
    m = box2d(2)
    dm = dofmap_on(m, degree=2)
    g = lambda p: p[:, 0] + 2.0 * p[:, 1]
    dofs, vals = resolve_dirichlet(BCSet().add(4, g), dm)     # y = 1 face
    assert len(dofs) == 5                                     # 3 vertices + 2 midpoints
    assert np.allclose(vals, g(dm.dof_points[dofs]), atol=1e-15)
    # midpoints really are at quarter points of the top edge
    xs = np.sort(dm.dof_points[dofs][:, 0])
    assert np.allclose(xs, [0.0, 0.25, 0.5, 0.75, 1.0])


def test_corner_takes_lowest_marker_value():
    m = box2d(2)
    dm = dofmap_on(m, degree=1)
    bc = BCSet().add(3, 30.0).add(1, 10.0)        # corner (0,0) lies on both
    dofs, vals = resolve_dirichlet(bc, dm)
    corner = np.flatnonzero((dm.dof_points[dofs] == 0.0).all(axis=1))
    assert len(corner) == 1
    assert vals[corner[0]] == 10.0
    # order of add() calls must not matter
    dofs2, vals2 = resolve_dirichlet(BCSet().add(1, 10.0).add(3, 30.0), dm)
    assert np.array_equal(dofs, dofs2) and np.array_equal(vals, vals2)


def test_marker_zero_rejected():
    with pytest.raises(ConfigError):
        BCSet().add(0, 1.0)


def test_unknown_marker_rejected():
    m = box2d(2)
    dm = dofmap_on(m, degree=1)
    with pytest.raises(ConfigError):
        resolve_dirichlet(BCSet().add(9, 1.0), dm)


# ---------------- row replacement ----------------

def test_three_by_three_hand_oracle():
    # single reference triangle, constrain dof 0 to g = 2
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    from pfem.mesh import Mesh
    m = Mesh(verts, np.array([[0, 1, 2]]),
             np.array([[0, 1], [1, 2], [0, 2]]), np.array([1, 2, 3]))
    dm, a, b = poisson_system(m)
    apply_dirichlet(a, b, np.array([0]), np.array([2.0]))
    ad = dense(a)
    # diagonal of the original row 0 was 1.0, so c = 1
    assert np.allclose(ad[0], [1.0, 0.0, 0.0], atol=1e-15)
    assert b.to_global()[0] == pytest.approx(2.0)
    # other rows untouched
    assert np.allclose(ad[1], [-0.5, 0.5, 0.0], atol=1e-15)


def test_solution_attains_boundary_values():
    m = box2d(6)
    dm, a, b = poisson_system(m, degree=2, n_ranks=2)
    g = lambda p: 1.0 + p[:, 0] * p[:, 1]
    dofs, vals = resolve_dirichlet(
        BCSet().add(1, g).add(2, g).add(3, g).add(4, g), dm)
    apply_dirichlet(a, b, dofs, vals)
    # row replacement breaks symmetry, so use a nonsymmetric solver
    cfg = SolverConfig(method="gmres", tol=1e-12, max_iters=500, preconditioner="jacobi")
    res = solve(a, b, cfg)
    x = res.x.to_global()
    assert res.converged
    assert np.abs(x[dofs] - vals).max() < 10 * 1e-12


def test_apply_is_idempotent():
    m = box2d(4)
    dm, a, b = poisson_system(m, n_ranks=2)
    dofs, vals = resolve_dirichlet(BCSet().add(1, 3.0).add(2, -1.0), dm)
    apply_dirichlet(a, b, dofs, vals)
    a1 = [p.data.copy() for p in a.parts]
    b1 = b.to_global().copy()
    apply_dirichlet(a, b, dofs, vals)
    for p, d in zip(a.parts, a1):
        assert np.array_equal(p.data, d)
    assert np.array_equal(b.to_global(), b1)


def test_unconstrained_rows_bitwise_untouched():
    m = box2d(4)
    dm, a, b = poisson_system(m, degree=2)
    before = [p.data.copy() for p in a.parts]
    bb = b.to_global().copy()
    dofs, vals = resolve_dirichlet(BCSet().add(1, 7.0), dm)
    apply_dirichlet(a, b, dofs, vals)
    constrained = np.zeros(dm.n_global, dtype=bool)
    constrained[dofs] = True
    for r, p in enumerate(a.parts):
        umap = a.row_map.unique_maps[r]
        rowid = np.repeat(np.arange(p.shape[0]), np.diff(p.indptr))
        keep = ~constrained[umap[rowid]]
        assert np.array_equal(p.data[keep], before[r][keep])
    after = b.to_global()
    assert np.array_equal(after[~constrained], bb[~constrained])


def test_row_scale_matches_original_diagonal():
    m = box2d(4)
    dm, a, b = poisson_system(m)
    diag_before = {d: dense(a)[d, d] for d in range(dm.n_global)}
    dofs, vals = resolve_dirichlet(BCSet().add(1, 1.0), dm)
    apply_dirichlet(a, b, dofs, vals)
    ad = dense(a)
    bg = b.to_global()
    for d in dofs:
        assert ad[d, d] == pytest.approx(abs(diag_before[int(d)]), rel=1e-15)
        assert bg[d] == pytest.approx(ad[d, d] * 1.0, rel=1e-15)


def test_symmetrize_keeps_matrix_symmetric_and_solution():
    m = box2d(5)
    g = lambda p: p[:, 0] - 0.5 * p[:, 1]
    bc = BCSet().add(1, g).add(2, g).add(3, g).add(4, g)

    dm, a1, b1 = poisson_system(m, degree=2, n_ranks=2)
    dofs, vals = resolve_dirichlet(bc, dm)
    apply_dirichlet(a1, b1, dofs, vals)

    dm2, a2, b2 = poisson_system(m, degree=2, n_ranks=2)
    apply_dirichlet(a2, b2, dofs, vals, symmetrize=True)
    ad = dense(a2)
    assert np.abs(ad - ad.T).max() < 1e-12

    x1 = solve(a1, b1, SolverConfig(method="gmres", tol=1e-12, max_iters=800,
                                    preconditioner="jacobi")).x.to_global()
    x2 = solve(a2, b2, SolverConfig(method="cg", tol=1e-12, max_iters=800,
                                    preconditioner="jacobi")).x.to_global()
    assert np.abs(x1 - x2).max() < 1e-9


def test_symmetrize_needs_rhs():
    m = box2d(3)
    dm, a, b = poisson_system(m)
    dofs, vals = resolve_dirichlet(BCSet().add(1, 0.0), dm)
    with pytest.raises(ConfigError):
        apply_dirichlet(a, None, dofs, vals, symmetrize=True)


def test_laplace_linear_solution_exact():
    # u = x is harmonic; Dirichlet everywhere reproduces it to solver tol
    m = box2d(4)
    dm, a, b = poisson_system(m, f=0.0)
    g = lambda p: p[:, 0]
    dofs, vals = resolve_dirichlet(
        BCSet().add(1, g).add(2, g).add(3, g).add(4, g), dm)
    apply_dirichlet(a, b, dofs, vals, symmetrize=True)
    res = solve(a, b, SolverConfig(method="cg", tol=1e-13, max_iters=300))
    assert np.abs(res.x.to_global() - g(dm.dof_points)).max() < 1e-10
