"""Sparse direct linear solve and damped Newton iteration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import DiscreteField, assemble_system, dof_points, zero_field
from .errors import LinearSolverError, NewtonNonConvergence, ParameterError
from .femcore import DofMap, SpaceKind

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 25


@dataclass(frozen=True)
class NewtonReport:
    iterations: int
    residual_history: tuple
    converged: bool
    final_residual: float


def solve_sparse(jac, rhs):
    """Solve J x = rhs by sparse LU with partial pivoting."""
    rhs = np.asarray(rhs, dtype=float)
    try:
        # the Jacobians here are structurally symmetric; MMD on A^T+A keeps
        # fill-in far below the COLAMD default
        lu = spla.splu(sp.csc_matrix(jac), permc_spec="MMD_AT_PLUS_A")
        x = lu.solve(rhs)
    except RuntimeError as exc:  # SuperLU reports the failing pivot
        raise LinearSolverError(f"sparse LU factorization failed: {exc}") from exc
    if not np.isfinite(x).all():
        raise LinearSolverError("sparse solve produced non-finite entries")
    return x


def _newton_loop(system, coeffs, tol, max_iter, line_search):
    residual, jac = system(coeffs)
    history = [float(np.linalg.norm(residual))]
    while history[-1] > tol:
        if len(history) - 1 >= max_iter:
            raise NewtonNonConvergence(
                f"no convergence after {max_iter} iterations (residual {history[-1]:.3e})",
                history,
            )
        step = solve_sparse(jac, residual)
        if line_search:
            lam, base = 1.0, history[-1]
            while True:
                trial = coeffs - lam * step
                residual, jac = system(trial)
                if np.linalg.norm(residual) <= (1.0 - 1e-4 * lam) * base or lam <= 2.0**-10:
                    break
                lam *= 0.5
            coeffs = trial
        else:
            coeffs = coeffs - step
            residual, jac = system(coeffs)
        history.append(float(np.linalg.norm(residual)))
    return coeffs, history


def initial_guess(dofmap: DofMap, problem) -> DiscreteField:
    """Zero coefficients, with Dirichlet dofs preset to the boundary datum."""
    guess = zero_field(dofmap)
    dirichlet = getattr(problem, "dirichlet", None)
    if dirichlet is not None and dofmap.space is not SpaceKind.DG_P1 and len(dofmap.boundary_dofs):
        pts = dof_points(dofmap)[dofmap.boundary_dofs]
        guess.coeffs[dofmap.boundary_dofs] = np.asarray(dirichlet(pts), dtype=float)
    return guess


def newton_solve(
    space: SpaceKind,
    problem,
    initial: DiscreteField,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    line_search: bool = False,
):
    """Newton iteration u <- u - J(u)^-1 R(u) down to an absolute l2 residual.

    Raises :class:`NewtonNonConvergence` (carrying the residual history) when
    ``max_iter`` updates do not reach the tolerance.
    """
    if not tol > 0:
        raise ParameterError(f"tolerance must be positive, got {tol}")

    def system(coeffs):
        return assemble_system(space, DiscreteField(initial.dofmap, coeffs), problem)

    coeffs, history = _newton_loop(system, initial.coeffs.copy(), tol, max_iter, line_search)
    report = NewtonReport(
        iterations=len(history) - 1,
        residual_history=tuple(history),
        converged=True,
        final_residual=history[-1],
    )
    return DiscreteField(initial.dofmap, coeffs), report
