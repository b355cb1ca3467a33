"""Reference elements, quadrature, dof maps and pointwise nonlinearity kernels.

Three piecewise-linear spaces are supported: continuous P1 (vertex dofs),
Crouzeix-Raviart (facet-midpoint dofs, continuity in the mean) and
discontinuous P1 (cellwise dofs).
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi

from .errors import ParameterError
from .mesh import Mesh

MAX_QUAD_ORDER = 6


class SpaceKind(enum.Enum):
    CFEM_P1 = "cfem"
    CR = "cr"
    DG_P1 = "dg"


@dataclass(frozen=True)
class ModelParams:
    """Coefficients of the advection-diffusion-reaction model.

    ``nu`` scales diffusion, ``alpha`` the degenerate advection u^delta * sum_i du/dx_i,
    ``beta`` the bistable reaction u(1 - u^delta)(u^delta - gamma).
    """

    nu: float
    alpha: float
    beta: float
    gamma: float
    delta: float

    def __post_init__(self):
        if not self.nu > 0:
            raise ParameterError(f"nu must be positive, got {self.nu}")
        if self.alpha < 0:
            raise ParameterError(f"alpha must be nonnegative, got {self.alpha}")
        if self.beta < 0:
            raise ParameterError(f"beta must be nonnegative, got {self.beta}")
        if self.delta < 1:
            raise ParameterError(f"delta must be >= 1, got {self.delta}")
        if not 0 < self.gamma < 1:
            warnings.warn(f"gamma = {self.gamma} lies outside (0, 1)", stacklevel=2)


@dataclass(frozen=True)
class QuadRule:
    """Quadrature on the reference simplex, exact to total degree ``order``."""

    points: np.ndarray
    weights: np.ndarray
    order: int


def quadrature_rule(dim: int, order: int) -> QuadRule:
    """Collapsed Gauss-Jacobi rule on the reference triangle/tetrahedron."""
    if dim not in (2, 3):
        raise ParameterError(f"dim must be 2 or 3, got {dim}")
    if not 1 <= order <= MAX_QUAD_ORDER:
        raise ParameterError(f"quadrature order must lie in [1, {MAX_QUAD_ORDER}], got {order}")
    m = (order + 2) // 2
    ga, wa = roots_jacobi(m, dim - 1, 0)
    a = 0.5 * (ga + 1.0)
    wa = wa / 2.0 ** (dim)  # absorbs the [-1,1] -> [0,1] map and the (1-a)^(d-1) weight
    gl, wl = leggauss(m)
    c = 0.5 * (gl + 1.0)
    wc = wl / 2.0
    if dim == 2:
        A, B = np.meshgrid(a, c, indexing="ij")
        W = np.outer(wa, wc)
        pts = np.column_stack([A.ravel(), (B * (1 - A)).ravel()])
    else:
        gb, wb = roots_jacobi(m, 1, 0)
        b = 0.5 * (gb + 1.0)
        wb = wb / 4.0
        A, B, C = np.meshgrid(a, b, c, indexing="ij")
        W = np.einsum("i,j,k->ijk", wa, wb, wc)
        pts = np.column_stack(
            [A.ravel(), (B * (1 - A)).ravel(), (C * (1 - A) * (1 - B)).ravel()]
        )
    return QuadRule(points=pts, weights=W.ravel(), order=order)


def _hat_values(pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(pts)
    return np.column_stack([1.0 - pts.sum(axis=1), pts])


def _hat_gradients(dim: int) -> np.ndarray:
    return np.vstack([-np.ones((1, dim)), np.eye(dim)])


def basis_values(space: SpaceKind, pts: np.ndarray) -> np.ndarray:
    """Values of the d+1 local basis functions at reference points (n, d)."""
    hats = _hat_values(pts)
    if space is SpaceKind.CR:
        d = np.atleast_2d(pts).shape[1]
        return 1.0 - d * hats
    return hats


def basis_gradients(space: SpaceKind, dim: int) -> np.ndarray:
    """Constant reference gradients, one row per basis function."""
    g = _hat_gradients(dim)
    return -dim * g if space is SpaceKind.CR else g


def eval_basis(space: SpaceKind, ref_point):
    """Basis values and reference gradients at one reference point."""
    ref_point = np.asarray(ref_point, dtype=float)
    return basis_values(space, ref_point)[0], basis_gradients(space, len(ref_point))


@dataclass(eq=False)
class DofMap:
    """Global degree-of-freedom layout of one discrete space."""

    space: SpaceKind
    n_dofs: int
    cell_dofs: np.ndarray
    dof_entity: np.ndarray
    boundary_dofs: np.ndarray
    mesh: Mesh


def build_dofmap(mesh: Mesh, space: SpaceKind) -> DofMap:
    d = mesh.dim
    if space is SpaceKind.CFEM_P1:
        cell_dofs = mesh.cells.copy()
        n_dofs = mesh.n_vertices
        dof_entity = np.arange(n_dofs)
        boundary = np.unique(mesh.facets[mesh.boundary_flag].ravel())
    elif space is SpaceKind.CR:
        cell_dofs = mesh.cell_facets.copy()
        n_dofs = mesh.n_facets
        dof_entity = np.arange(n_dofs)
        boundary = np.flatnonzero(mesh.boundary_flag)
    elif space is SpaceKind.DG_P1:
        n_dofs = (d + 1) * mesh.n_cells
        cell_dofs = np.arange(n_dofs, dtype=np.int64).reshape(mesh.n_cells, d + 1)
        dof_entity = np.repeat(np.arange(mesh.n_cells), d + 1)
        boundary = np.empty(0, dtype=np.int64)
    else:
        raise ParameterError(f"unknown space kind {space!r}")
    return DofMap(
        space=space,
        n_dofs=n_dofs,
        cell_dofs=cell_dofs,
        dof_entity=dof_entity,
        boundary_dofs=boundary,
        mesh=mesh,
    )


def dof_points(dofmap: DofMap) -> np.ndarray:
    """Physical point attached to each dof (vertex, facet midpoint or cell vertex)."""
    mesh = dofmap.mesh
    if dofmap.space is SpaceKind.CFEM_P1:
        return mesh.vertices.copy()
    if dofmap.space is SpaceKind.CR:
        return mesh.vertices[mesh.facets].mean(axis=1)
    return mesh.vertices[mesh.cells].reshape(-1, mesh.dim)


def signed_pow(u, delta: float):
    """Odd extension ``sign(u) * |u|**delta`` of the power function."""
    if delta < 1:
        raise ParameterError(f"delta must be >= 1, got {delta}")
    u = np.asarray(u, dtype=float)
    if delta == 1:
        out = u + 0.0
    else:
        out = np.sign(u) * np.abs(u) ** delta
    return out if out.ndim else float(out)


def d_signed_pow(u, delta: float):
    """Derivative ``delta * |u|**(delta-1)`` of :func:`signed_pow`."""
    if delta < 1:
        raise ParameterError(f"delta must be >= 1, got {delta}")
    u = np.asarray(u, dtype=float)
    if delta == 1:
        out = np.ones_like(u)
    else:
        out = delta * np.abs(u) ** (delta - 1.0)
    return out if out.ndim else float(out)


def nonlinear_kernels(u, grad_u, p: ModelParams):
    """Pointwise advection/reaction terms and their exact partials.

    Returns ``(B, C, dB_du, dB_dgrad, dC_du)`` with
    ``B = signed_pow(u, delta) * sum_i grad_u[i]`` and
    ``C = u (1 - signed_pow(u, delta)) (signed_pow(u, delta) - gamma)``.
    Broadcasts over leading axes; ``grad_u`` has the spatial axis last.
    """
    u = np.asarray(u, dtype=float)
    grad_u = np.asarray(grad_u, dtype=float)
    s = signed_pow(u, p.delta)
    ds = d_signed_pow(u, p.delta)
    gsum = grad_u.sum(axis=-1)
    B = s * gsum
    C = u * (1.0 - s) * (s - p.gamma)
    dB_du = ds * gsum
    dB_dgrad = np.asarray(s)[..., None] * np.ones_like(grad_u)
    dC_du = (1.0 - s) * (s - p.gamma) + u * ds * (1.0 + p.gamma - 2.0 * s)
    return B, C, dB_du, dB_dgrad, dC_du


def default_quad_order(delta: float) -> int:
    """Volume quadrature order used for the nonlinear terms."""
    return min(MAX_QUAD_ORDER, math.ceil(2.0 * delta) + 2)


def reference_volume(dim: int) -> float:
    return 1.0 / math.factorial(dim)
