"""Finite element toolkit for a nonlinear advection-diffusion-reaction model.

Solves -nu*lap(u) + alpha*u^delta*sum_i du/dx_i - beta*u(1-u^delta)(u^delta-gamma) = f
on boxes with continuous P1, Crouzeix-Raviart and interior-penalty DG
elements, reproduces manufactured-solution convergence tables, checks the
model's closed-form well-posedness conditions, and runs a gated transient
extension for excitable-media simulations.
"""

from .analysis import (
    ConditionReport,
    ErrorTriple,
    energy_bound,
    eoc,
    error_norms,
    uniqueness_thresholds,
    verify_energy_bound,
)
from .assembly import (
    DGPenalty,
    DiscreteField,
    apply_dirichlet,
    assemble,
    assemble_system,
    directional_derivative_check,
    interpolate,
    mass_matrix,
    zero_field,
)
from .errors import (
    AssemblyError,
    ContractError,
    GbhError,
    LinearSolverError,
    MeshIntegrityError,
    NewtonNonConvergence,
    ParameterError,
)
from .femcore import (
    DofMap,
    ModelParams,
    QuadRule,
    SpaceKind,
    build_dofmap,
    d_signed_pow,
    dof_points,
    eval_basis,
    nonlinear_kernels,
    quadrature_rule,
    signed_pow,
)
from .io_cli import RunConfig, cli_main, parse_config, write_convergence_csv, write_vtk
from .mesh import AffineMap, Mesh, build_structured_mesh, cell_affine_map, facet_geometry
from .problems import (
    Case,
    ConvergenceReport,
    ProblemSpec,
    TransientSpec,
    exact_solution,
    make_problem,
    manufactured_forcing,
    run_convergence_study,
    run_transient,
    transient_initial_state,
    transient_step,
)
from .solver import NewtonReport, initial_guess, newton_solve, solve_sparse

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
