"""pfem: a desk-scale parallel finite element toolkit.

The library mirrors the architecture of distributed-memory FE codes inside a
single process: meshes are partitioned over ranks, DoFs carry repeated and
unique (owned) maps, matrices are row-partitioned CSR, Krylov solvers use
deterministic rank-ordered reductions, and an additive Schwarz preconditioner
with subdomain LU/ILU solves accelerates them. On top sit algebraically split
Navier-Stokes schemes (exact block LU, Perot, Yosida and pressure-corrected
variants) with an adaptive time stepper driven by the pressure correction.
"""

__version__ = "0.1.0"

from .mesh import BoxSpec, Mesh, cell_volume, generate_box, read_gmsh, write_gmsh
from .partition import DualGraph, Partition, add_halo, build_dual_graph, \
    partition_greedy, restrict_mesh
from .fespace import BlockMap, DofMap, LagrangeElement, QuadratureRule, \
    build_dofmap, eval_basis, facet_quadrature_for, quadrature_for
from .assembly import assemble_lumped_mass, assemble_matrix, assemble_vector, \
    boundary, build_graph, coefficient, ddx, dot, fe_function, \
    fe_vector_function, grad, integrate_error, interpolate, test, trial, \
    vector_coefficient
from .bc import BCSet, apply_dirichlet, resolve_dirichlet
from .linalg import DistMatrix, DistVector, SolveResult, SolverConfig, \
    apply_preconditioner, build_schwarz, ilu0_factor, make_preconditioner, \
    solve, spmv, write_matrix_market
from .splitting import SaddleSystem, SplitConfig, StepResult, TimeLoopResult, \
    assemble_block_load, split_step, steady_stokes, time_loop
from .params import ParamTree, parse_params, read_params
from .vtkio import read_vtk, write_vtk
from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .errors import ConfigError, FormError, ParamParseError, PatternError, \
    SolverError
