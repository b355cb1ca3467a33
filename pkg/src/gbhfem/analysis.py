"""Error norms, convergence rates, and numeric well-posedness checks.

The norms are measured by elementwise quadrature against a user-supplied
analytic solution handle exposing ``value(points)`` and ``gradient(points)``.
The condition checker evaluates the closed-form uniqueness thresholds of the
model and the a priori energy bound

    K = beta*delta*(1+gamma)^(2(delta+1)/delta)/(delta+1)
        * ((delta+2)/(delta+1))^((delta+2)/delta) * |Omega|
        + ||f||_{H^-1}^2 / nu,

against which every converged conforming solution can be tested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .assembly import DiscreteField, side_tables, volume_tables
from .errors import ContractError, ParameterError
from .femcore import ModelParams, SpaceKind

NOT_APPLICABLE = None


@dataclass(frozen=True)
class ErrorTriple:
    """Discretization errors in the norms used by the convergence studies."""

    l2: float
    h1_broken: float
    h1_full: float
    dg_energy: float


@dataclass(frozen=True)
class ConditionReport:
    """Evaluated uniqueness conditions; ``satisfied`` is None when a
    condition does not apply (e.g. divides by beta = 0)."""

    lambda1: float
    thresholds: dict
    satisfied: dict
    K_tilde: float


def error_norms(field: DiscreteField, exact, quad_order: int = 6) -> ErrorTriple:
    """L2, broken-H1 and jump-augmented energy errors against ``exact``.

    The energy variant adds squared facet jumps of the field; on boundary
    facets the exact trace is subtracted so non-homogeneous data are handled.
    """
    if quad_order < 4:
        raise ParameterError("error quadrature order must be at least 4")
    dofmap = field.dofmap
    mesh = dofmap.mesh
    vt = volume_tables(mesh, dofmap.space, quad_order)
    nc, nq, d = vt.xq.shape
    ue = field.coeffs[dofmap.cell_dofs]
    uh_q = ue @ vt.vals.T
    grad_h = np.einsum("cb,cbd->cd", ue, vt.physgrads)

    pts = vt.xq.reshape(-1, d)
    u_ex = np.asarray(exact.value(pts), dtype=float).reshape(nc, nq)
    g_ex = np.asarray(exact.gradient(pts), dtype=float).reshape(nc, nq, d)

    l2_sq = float(np.sum(vt.wdet * (uh_q - u_ex) ** 2))
    diff_g = grad_h[:, None, :] - g_ex
    h1_sq = float(np.sum(vt.wdet * (diff_g**2).sum(axis=-1)))

    st = side_tables(mesh, dofmap.space, quad_order)
    cd = dofmap.cell_dofs
    jump_sq = 0.0
    if len(st.cp):
        up = np.einsum("fqb,fb->fq", st.vals_p, field.coeffs[cd[st.cp]])
        um = np.einsum("fqb,fb->fq", st.vals_m, field.coeffs[cd[st.cm]])
        jump_sq += float(np.sum(st.w_int * (up - um) ** 2))
    if len(st.cb):
        ub = np.einsum("fqb,fb->fq", st.vals_b, field.coeffs[cd[st.cb]])
        gb = np.asarray(exact.value(st.xq_bnd.reshape(-1, d)), dtype=float)
        jump_sq += float(np.sum(st.w_bnd * (ub - gb.reshape(ub.shape)) ** 2))

    return ErrorTriple(
        l2=math.sqrt(l2_sq),
        h1_broken=math.sqrt(h1_sq),
        h1_full=math.sqrt(l2_sq + h1_sq),
        dg_energy=math.sqrt(h1_sq + jump_sq),
    )


def eoc(errors, hs):
    """Experimental orders of convergence between consecutive levels.

    ``rate_k = log(e_{k-1}/e_k) / log(h_{k-1}/h_k)``; a vanishing error is
    reported as ``inf``.
    """
    errors = [float(e) for e in errors]
    hs = [float(h) for h in hs]
    if len(errors) != len(hs) or len(errors) < 2:
        raise ParameterError("need two or more matching errors and mesh sizes")
    if any(h <= 0 for h in hs) or any(e < 0 for e in errors):
        raise ParameterError("mesh sizes must be positive and errors nonnegative")
    rates = []
    for (e0, e1), (h0, h1) in zip(zip(errors, errors[1:]), zip(hs, hs[1:])):
        if e1 == 0.0 or e0 == 0.0:
            rates.append(math.inf)
        else:
            rates.append(math.log(e0 / e1) / math.log(h0 / h1))
    return rates


def box_lambda1(domain) -> float:
    """First Dirichlet-Laplacian eigenvalue of an axis-aligned box."""
    dom = np.asarray(domain, dtype=float)
    sides = dom[:, 1] - dom[:, 0]
    if np.any(sides <= 0):
        raise ParameterError("degenerate domain box")
    return float(np.sum((np.pi / sides) ** 2))


def energy_bound(p: ModelParams, f_neg_norm: float, volume: float) -> float:
    """A priori bound on nu*|u|_1^2 + beta*||u||_{2d+2}^{2d+2}."""
    if not volume > 0:
        raise ParameterError(f"volume must be positive, got {volume}")
    d = p.delta
    first = (
        p.beta
        * d
        * (1.0 + p.gamma) ** (2.0 * (d + 1.0) / d)
        / (d + 1.0)
        * ((d + 2.0) / (d + 1.0)) ** ((d + 2.0) / d)
        * volume
    )
    return first + f_neg_norm**2 / p.nu


def uniqueness_thresholds(
    p: ModelParams,
    dim: int,
    domain=None,
    lambda1: float | None = None,
    gn_constant: float = 1.0,
    f_neg_norm: float = 0.0,
) -> ConditionReport:
    """Evaluate the closed-form uniqueness conditions on nu.

    ``general`` is the condition
    ``nu > max(4^d a^2/b, (b/l1)(4^d (1+g)^2 (1+d)^2 - 2g))``;
    ``delta1`` its sharper variant for delta = 1; ``interpolation`` the
    variant built from the energy bound, whose interpolation constant is not
    pinned down analytically and enters through ``gn_constant`` (the check is
    therefore indicative, not rigorous).
    """
    if dim not in (2, 3):
        raise ParameterError(f"dim must be 2 or 3, got {dim}")
    if domain is None:
        domain = [(0.0, 1.0)] * dim
    dom = np.asarray(domain, dtype=float)
    lam1 = float(lambda1) if lambda1 is not None else box_lambda1(dom)
    volume = float(np.prod(dom[:, 1] - dom[:, 0]))
    K = energy_bound(p, f_neg_norm, volume)

    g, d, a, b = p.gamma, p.delta, p.alpha, p.beta
    thresholds: dict = {}
    satisfied: dict = {}

    second = (b / lam1) * (4.0**d * (1.0 + g) ** 2 * (1.0 + d) ** 2 - 2.0 * g)
    if b > 0:
        thr = max(4.0**d * a**2 / b, second)
        thresholds["general"] = thr
        satisfied["general"] = p.nu > thr
    else:
        thresholds["general"] = math.nan
        satisfied["general"] = NOT_APPLICABLE

    if d == 1 and b > 0:
        thr = max(2.0 * b * (1.0 + g + g**2) / lam1, a**2 / (2.0 * b))
        thresholds["delta1"] = thr
        satisfied["delta1"] = p.nu > thr
    else:
        thresholds["delta1"] = math.nan
        satisfied["delta1"] = NOT_APPLICABLE

    # interpolation-based condition: nu + b*g/l1 > rhs, reported as nu > rhs - b*g/l1
    if dim == 2:
        expo = 1.0 / (2.0 * (d + 1.0))
    else:
        expo = (2.0 - d) / (4.0 * (d + 1.0))
    if b > 0 and (dim == 2 or d <= 2):
        rhs = (b / lam1) * 2.0 ** (2.0 * d - 1.0) * (1.0 + g) ** 2 * (d + 1.0) ** 2
        rhs += 2.0 * gn_constant * a / lam1**expo * math.sqrt(K / b)
        thr = rhs - b * g / lam1
        thresholds["interpolation"] = thr
        satisfied["interpolation"] = p.nu > thr
    else:
        thresholds["interpolation"] = math.nan
        satisfied["interpolation"] = NOT_APPLICABLE

    return ConditionReport(lambda1=lam1, thresholds=thresholds, satisfied=satisfied, K_tilde=K)


def verify_energy_bound(field: DiscreteField, p: ModelParams, forcing, quad_order: int = 6):
    """Check the discrete solution against the a priori energy bound.

    Returns ``(lhs, K, holds)`` with
    ``lhs = nu*||grad u_h||^2 + beta*||u_h||_{2d+2}^{2d+2}`` and the dual
    norm of f bounded by ``||f||_0 / sqrt(lambda1)``.  Only meaningful for
    the conforming space.
    """
    dofmap = field.dofmap
    if dofmap.space is not SpaceKind.CFEM_P1:
        raise ContractError("energy bound applies to the conforming space only")
    mesh = dofmap.mesh
    vt = volume_tables(mesh, dofmap.space, quad_order)
    nc, nq, d = vt.xq.shape
    ue = field.coeffs[dofmap.cell_dofs]
    uh_q = ue @ vt.vals.T
    grad_h = np.einsum("cb,cbd->cd", ue, vt.physgrads)
    grad_sq = float(np.sum(vt.volume * (grad_h**2).sum(axis=1)))
    lp_norm = float(np.sum(vt.wdet * np.abs(uh_q) ** (2.0 * p.delta + 2.0)))
    lhs = p.nu * grad_sq + p.beta * lp_norm

    if forcing is None:
        f_l2_sq = 0.0
    else:
        f_q = np.asarray(forcing(vt.xq.reshape(-1, d)), dtype=float).reshape(nc, nq)
        f_l2_sq = float(np.sum(vt.wdet * f_q**2))
    lam1 = box_lambda1(mesh.extent)
    K = energy_bound(p, math.sqrt(f_l2_sq / lam1), mesh.box_volume())
    return lhs, K, lhs <= K
