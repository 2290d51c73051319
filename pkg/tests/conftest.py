import numpy as np
import pytest

from pfem.fespace import LagrangeElement, build_dofmap
from pfem.mesh import BoxSpec, generate_box
from pfem.partition import add_halo, build_dual_graph, partition_greedy


def box2d(n=4, bounds=((0.0, 1.0), (0.0, 1.0))):
    nn = (n, n) if np.isscalar(n) else tuple(n)
    return generate_box(BoxSpec(bounds=bounds, subdivisions=nn))


def box3d(n=2, bounds=((0.0, 1.0),) * 3):
    nn = (n, n, n) if np.isscalar(n) else tuple(n)
    return generate_box(BoxSpec(bounds=bounds, subdivisions=nn))


def partitioned(mesh, n_ranks, halo=1, seed=0):
    graph = build_dual_graph(mesh)
    part = partition_greedy(graph, n_ranks, seed=seed)
    if halo > 0:
        part = add_halo(part, graph, halo)
    return part


def dofmap_on(mesh, n_ranks=1, degree=1, halo=1, seed=0):
    part = partitioned(mesh, n_ranks, halo=halo, seed=seed)
    return build_dofmap(mesh, part, LagrangeElement(mesh.dim, degree))


def dense(a):
    return a.to_scipy().toarray()


class AlgebraicMap:
    """Contiguous row partition of [0, n) with no mesh attached, enough for
    the vector/matrix/preconditioner contracts."""

    def __init__(self, n, n_ranks):
        cuts = np.linspace(0, n, n_ranks + 1).astype(np.int64)
        self.n_global = n
        self.n_ranks = n_ranks
        self.unique_maps = [np.arange(cuts[r], cuts[r + 1]) for r in range(n_ranks)]
        self.repeated_maps = [m.copy() for m in self.unique_maps]
        self.dof_owner = np.repeat(np.arange(n_ranks), np.diff(cuts))
