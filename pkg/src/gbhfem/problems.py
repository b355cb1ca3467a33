"""Benchmark problems, convergence studies and the transient driver.

Closed-form solutions on the unit box:

* ``EX1_POLY``  u = prod_i (x_i - x_i^2), homogeneous Dirichlet data;
* ``EX1_SINE``  u = (1/16) prod_i sin(pi x_i), homogeneous Dirichlet data;
* ``EX2_WAVE``  u = 0.5 - 0.5 tanh(z / (r - abar)) with abar = alpha*sqrt(2),
  r = sqrt(abar^2 + 8) and z = sum_i x_i, a smooth front with
  non-homogeneous Dirichlet data.

Forcings are manufactured by applying the full nonlinear operator to these
solutions, so every discretization can be measured against the exact field.
The transient system couples the same spatial operator to a pointwise gating
variable v through ``du/dt + ... + v = 0``, ``dv/dt = eps*(u - rho*v)`` and is
advanced by backward Euler with the gating update eliminated exactly.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .analysis import ErrorTriple, eoc, error_norms
from .assembly import (
    DGPenalty,
    DiscreteField,
    assemble,
    interpolate,
    mass_matrix,
)
from .errors import NewtonNonConvergence, ParameterError
from .femcore import ModelParams, SpaceKind, build_dofmap, signed_pow
from .mesh import Mesh, build_structured_mesh
from .solver import DEFAULT_MAX_ITER, DEFAULT_TOL, NewtonReport, _newton_loop, initial_guess, newton_solve


class Case(enum.Enum):
    EX1_POLY = "ex1_poly"
    EX1_SINE = "ex1_sine"
    EX2_WAVE = "ex2_wave"
    CUSTOM = "custom"


# ---------------------------------------------------------------------------
# exact solutions


class PolyBumpExact:
    """u = prod_i (x_i - x_i^2)."""

    def __init__(self, dim):
        self.dim = dim

    def value(self, x):
        x = np.atleast_2d(x)
        return np.prod(x - x**2, axis=1)

    def _others(self, x):
        terms = x - x**2
        return np.stack(
            [np.prod(np.delete(terms, i, axis=1), axis=1) for i in range(self.dim)], axis=1
        )

    def gradient(self, x):
        x = np.atleast_2d(x)
        return (1.0 - 2.0 * x) * self._others(x)

    def laplacian(self, x):
        x = np.atleast_2d(x)
        return -2.0 * self._others(x).sum(axis=1)


class SineBumpExact:
    """u = (1/16) prod_i sin(pi x_i)."""

    def __init__(self, dim):
        self.dim = dim

    def value(self, x):
        x = np.atleast_2d(x)
        return np.prod(np.sin(np.pi * x), axis=1) / 16.0

    def gradient(self, x):
        x = np.atleast_2d(x)
        s = np.sin(np.pi * x)
        out = np.empty_like(s)
        for i in range(self.dim):
            others = np.prod(np.delete(s, i, axis=1), axis=1)
            out[:, i] = np.pi * np.cos(np.pi * x[:, i]) * others / 16.0
        return out

    def laplacian(self, x):
        return -self.dim * np.pi**2 * self.value(x)


class TanhWaveExact:
    """Planar front u = 0.5 - 0.5 tanh(z/c), z = sum_i x_i.

    The width c = sqrt(2*alpha^2 + 8) - alpha*sqrt(2) ties the front to the
    advection strength; the front sits on the hyperplane z = 0 through the
    origin corner.
    """

    def __init__(self, dim, alpha):
        self.dim = dim
        abar = alpha * math.sqrt(2.0)
        self.c = math.sqrt(abar**2 + 8.0) - abar

    def _z(self, x):
        return x.sum(axis=1)

    def value(self, x):
        x = np.atleast_2d(x)
        return 0.5 - 0.5 * np.tanh(self._z(x) / self.c)

    def gradient(self, x):
        x = np.atleast_2d(x)
        th = np.tanh(self._z(x) / self.c)
        dudz = -0.5 * (1.0 - th**2) / self.c
        return np.repeat(dudz[:, None], self.dim, axis=1)

    def laplacian(self, x):
        x = np.atleast_2d(x)
        th = np.tanh(self._z(x) / self.c)
        return self.dim * (1.0 - th**2) * th / self.c**2


@dataclass(frozen=True)
class AffineExact:
    """u = a0 + a . x; handy for linear-exactness checks."""

    a0: float
    a: tuple

    def value(self, x):
        return self.a0 + np.atleast_2d(x) @ np.asarray(self.a)

    def gradient(self, x):
        x = np.atleast_2d(x)
        return np.broadcast_to(np.asarray(self.a, dtype=float), x.shape).copy()

    def laplacian(self, x):
        return np.zeros(len(np.atleast_2d(x)))


def exact_handle(case: Case, dim: int, p: ModelParams | None = None):
    if case is Case.EX1_POLY:
        return PolyBumpExact(dim)
    if case is Case.EX1_SINE:
        return SineBumpExact(dim)
    if case is Case.EX2_WAVE:
        alpha = p.alpha if p is not None else 0.2
        return TanhWaveExact(dim, alpha)
    raise ParameterError(f"no closed-form solution attached to case {case!r}")


def exact_solution(case: Case, dim: int, point, p: ModelParams | None = None):
    """Value, gradient and Laplacian of the case's solution at one point."""
    h = exact_handle(case, dim, p)
    x = np.atleast_2d(np.asarray(point, dtype=float))
    return float(h.value(x)[0]), h.gradient(x)[0], float(h.laplacian(x)[0])


def forcing_from_exact(exact, p: ModelParams):
    """Manufactured f = -nu*lap(u) + alpha*B(u) - beta*C(u) as a callable."""

    def forcing(x):
        x = np.atleast_2d(x)
        u = exact.value(x)
        grad = exact.gradient(x)
        lap = exact.laplacian(x)
        s = signed_pow(u, p.delta)
        return -p.nu * lap + p.alpha * s * grad.sum(axis=1) - p.beta * u * (1.0 - s) * (s - p.gamma)

    return forcing


def manufactured_forcing(case: Case, p: ModelParams, dim: int, point) -> float:
    f = forcing_from_exact(exact_handle(case, dim, p), p)
    return float(f(np.atleast_2d(np.asarray(point, dtype=float)))[0])


# ---------------------------------------------------------------------------
# problem specification


@dataclass(eq=False)
class ProblemSpec:
    """Everything the assembly needs to evaluate one stationary problem."""

    params: ModelParams
    dim: int
    case: Case
    forcing: object
    dirichlet: object
    discretization: SpaceKind
    penalty: DGPenalty = DGPenalty()
    quad_order: int | None = None
    _cache: dict = dc_field(default_factory=dict, repr=False)


def make_problem(
    case: Case,
    p: ModelParams,
    dim: int,
    space: SpaceKind,
    sigma: float = DGPenalty().sigma,
    quad_order: int | None = None,
) -> ProblemSpec:
    exact = exact_handle(case, dim, p)
    return ProblemSpec(
        params=p,
        dim=dim,
        case=case,
        forcing=forcing_from_exact(exact, p),
        dirichlet=lambda x: exact.value(x),
        discretization=space,
        penalty=DGPenalty(sigma),
        quad_order=quad_order,
    )


# ---------------------------------------------------------------------------
# convergence studies


@dataclass(frozen=True)
class LevelRecord:
    n: int
    h: float
    l2_error: float
    h1_error: float
    eoc_l2: float | None
    eoc_h1: float | None
    newton_iters: int
    errors: ErrorTriple
    field: DiscreteField | None = None


@dataclass(frozen=True)
class ConvergenceReport:
    method: SpaceKind
    case: Case
    dim: int
    records: tuple

    @property
    def finest(self) -> LevelRecord:
        return self.records[-1]


_ENERGY_ATTR = {
    SpaceKind.CFEM_P1: "h1_full",
    SpaceKind.CR: "h1_broken",
    SpaceKind.DG_P1: "dg_energy",
}


def run_convergence_study(
    case: Case,
    method: SpaceKind,
    dim: int,
    levels,
    p: ModelParams,
    sigma: float = DGPenalty().sigma,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    quad_order: int | None = None,
    error_quad_order: int = 6,
    keep_fields: bool = False,
) -> ConvergenceReport:
    """Solve on successively refined meshes and tabulate errors and rates."""
    levels = [int(n) for n in levels]
    if any(b <= a for a, b in zip(levels, levels[1:])) or not levels:
        raise ParameterError("levels must be strictly increasing")
    exact = exact_handle(case, dim, p)
    hs, l2s, h1s, iters, fields, triples = [], [], [], [], [], []
    for n in levels:
        mesh = build_structured_mesh(dim, n)
        dofmap = build_dofmap(mesh, method)
        problem = make_problem(case, p, dim, method, sigma=sigma, quad_order=quad_order)
        try:
            uh, report = newton_solve(method, problem, initial_guess(dofmap, problem), tol, max_iter)
        except NewtonNonConvergence as exc:
            raise NewtonNonConvergence(f"level n={n}: {exc}", exc.history) from exc
        triple = error_norms(uh, exact, quad_order=error_quad_order)
        hs.append(mesh.h)
        l2s.append(triple.l2)
        h1s.append(getattr(triple, _ENERGY_ATTR[method]))
        iters.append(report.iterations)
        triples.append(triple)
        fields.append(uh if keep_fields else None)
    rates_l2 = [None] + eoc(l2s, hs) if len(levels) > 1 else [None]
    rates_h1 = [None] + eoc(h1s, hs) if len(levels) > 1 else [None]
    records = tuple(
        LevelRecord(
            n=n,
            h=h,
            l2_error=l2,
            h1_error=h1,
            eoc_l2=r2,
            eoc_h1=r1,
            newton_iters=it,
            errors=tr,
            field=f,
        )
        for n, h, l2, h1, r2, r1, it, tr, f in zip(
            levels, hs, l2s, h1s, rates_l2, rates_h1, iters, triples, fields
        )
    )
    return ConvergenceReport(method=method, case=case, dim=dim, records=records)


# ---------------------------------------------------------------------------
# transient excitable-media driver


@dataclass(eq=False)
class TransientSpec:
    """Configuration of the gated reaction-diffusion-advection run."""

    params: ModelParams
    epsilon: float = 0.01
    rho: float = 0.05
    dt: float = 0.2
    t_end: float = 650.0
    mesh_n: int = 100
    domain: tuple = ((0.0, 300.0), (0.0, 300.0))
    discretization: SpaceKind = SpaceKind.CFEM_P1
    snapshot_times: tuple = (80.0, 200.0, 650.0)
    sigma: float = DGPenalty().sigma
    newton_tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    line_search: bool = False

    def __post_init__(self):
        if not self.dt > 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")
        if self.t_end < self.dt:
            raise ParameterError("t_end must be at least one step long")
        if self.discretization is SpaceKind.CR:
            raise ParameterError("the transient driver supports the conforming and DG spaces")
        if len(self.domain) != 2:
            raise ParameterError("the transient driver is two-dimensional")


def transient_mesh(spec: TransientSpec) -> Mesh:
    return build_structured_mesh(2, spec.mesh_n, extent=spec.domain)


def transient_initial_state(spec: TransientSpec, mesh: Mesh | None = None):
    """Cross-shaped excitation for u and a shifted refractory copy for v.

    u0 is 1 on the axis-aligned cross of half-width 0.05*side through the
    domain center, 0 elsewhere; v0 is 0.1 on the same cross shifted by a
    tenth of the side in both coordinates.  The offset copy blocks one flank
    of every outgoing front, and the broken ends curl into self-sustained
    spirals (a centered blocking region lets the fronts re-close and the
    activity die instead).
    """
    mesh = mesh if mesh is not None else transient_mesh(spec)
    dofmap = build_dofmap(mesh, spec.discretization)
    dom = np.asarray(spec.domain, dtype=float)
    center = dom.mean(axis=1)
    sides = dom[:, 1] - dom[:, 0]

    def on_cross(x, shift):
        return (np.abs(x[:, 0] - center[0] - shift * sides[0]) < 0.05 * sides[0]) | (
            np.abs(x[:, 1] - center[1] - shift * sides[1]) < 0.05 * sides[1]
        )

    def u0(x):
        return np.where(on_cross(x, 0.0), 1.0, 0.0)

    def v0(x):
        return np.where(on_cross(x, 0.1), 0.1, 0.0)

    return interpolate(dofmap, u0), interpolate(dofmap, v0)


def _transient_context(spec: TransientSpec, dofmap):
    problem = ProblemSpec(
        params=spec.params,
        dim=2,
        case=Case.CUSTOM,
        forcing=None,
        dirichlet=None,  # natural (Neumann) boundary: all boundary facet terms dropped
        discretization=spec.discretization,
        penalty=DGPenalty(spec.sigma),
    )
    mass = mass_matrix(dofmap)
    gate = 1.0 / (1.0 + spec.epsilon * spec.rho * spec.dt)
    shift = 1.0 / spec.dt + spec.epsilon * spec.dt * gate
    return problem, mass, gate, shift


def transient_step(
    u_n: DiscreteField, v_n: DiscreteField, spec: TransientSpec, _ctx=None, predictor=None
):
    """One backward-Euler step; the gating variable is eliminated exactly.

    Solving ``v1 = (v_n + eps*dt*u1) / (1 + eps*rho*dt)`` pointwise reduces
    each step to a single spatial Newton solve for u1.  ``predictor``
    overrides the Newton start (the time loop extrapolates from the two
    previous states; the solve itself is unaffected).
    """
    dofmap = u_n.dofmap
    problem, mass, gate, shift = _ctx if _ctx is not None else _transient_context(spec, dofmap)
    explicit = mass @ (gate * v_n.coeffs - u_n.coeffs / spec.dt)

    def system(coeffs):
        fld = DiscreteField(dofmap, coeffs)
        residual, jac = assemble(spec.discretization, fld, problem)
        residual = residual + shift * (mass @ coeffs) + explicit
        return residual, jac + shift * mass

    start = u_n.coeffs.copy() if predictor is None else np.asarray(predictor, dtype=float)
    coeffs, history = _newton_loop(system, start, spec.newton_tol, spec.max_iter, spec.line_search)
    u1 = DiscreteField(dofmap, coeffs)
    v1 = DiscreteField(dofmap, gate * (v_n.coeffs + spec.epsilon * spec.dt * coeffs))
    report = NewtonReport(len(history) - 1, tuple(history), True, history[-1])
    return u1, v1, report


def run_transient(spec: TransientSpec, mesh: Mesh | None = None, on_snapshot=None):
    """March to t_end; returns final fields and the requested snapshots.

    ``on_snapshot(t, u, v)`` is invoked whenever a step lands on (within half
    a step of) one of ``spec.snapshot_times``.
    """
    mesh = mesh if mesh is not None else transient_mesh(spec)
    u, v = transient_initial_state(spec, mesh)
    ctx = _transient_context(spec, u.dofmap)
    n_steps = int(round(spec.t_end / spec.dt))
    targets = sorted(spec.snapshot_times)
    snapshots = {}
    prev = None
    for k in range(1, n_steps + 1):
        t = k * spec.dt
        predictor = None if prev is None else 2.0 * u.coeffs - prev
        prev = u.coeffs
        try:
            u, v, _ = transient_step(u, v, spec, _ctx=ctx, predictor=predictor)
        except NewtonNonConvergence as exc:
            raise NewtonNonConvergence(f"step {k} (t = {t:g}): {exc}", exc.history) from exc
        if not np.isfinite(u.coeffs).all() or not np.isfinite(v.coeffs).all():
            raise NewtonNonConvergence(f"non-finite state at step {k} (t = {t:g})", [])
        while targets and t >= targets[0] - spec.dt / 2.0:
            snapshots[targets.pop(0)] = (u.copy(), v.copy())
            if on_snapshot is not None:
                on_snapshot(t, u, v)
    return u, v, snapshots
