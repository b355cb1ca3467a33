"""Command-line entry points, run configuration, CSV tables and VTK output.

Config files are flat ``key = value`` text; ``#`` starts a comment.  Keys:

    case            ex1_poly | ex1_sine | ex2_wave        (converge, solve)
    method          cfem | cr | dg                        (converge, solve, transient)
    dim             2 | 3                                  (converge, solve, check-conditions)
    levels          comma-separated increasing ints        (converge)
    n               mesh subdivisions for a single solve   (solve)
    nu, alpha, beta, gamma, delta                          model coefficients
    sigma           DG penalty scale (gamma_h = sigma/h)
    tol, max_iter   Newton control
    quad_order      volume quadrature override (0 = automatic)
    error_quad_order  quadrature for error norms
    out             output directory
    epsilon, rho, dt, t_end, mesh_n, domain_side,
    snapshot_times, line_search                            (transient)
    gn_constant, f_neg_norm                                (check-conditions)

Unknown keys are rejected.  Exit codes: 0 success, 2 configuration error,
3 solver failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from . import analysis, problems
from .assembly import DiscreteField
from .errors import GbhError, LinearSolverError, NewtonNonConvergence, ParameterError
from .femcore import ModelParams, SpaceKind, basis_values
from .mesh import Mesh
from .solver import initial_guess, newton_solve

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_IO = 4

_METHODS = {"cfem": SpaceKind.CFEM_P1, "cr": SpaceKind.CR, "dg": SpaceKind.DG_P1}
_CASES = {c.value: c for c in problems.Case if c is not problems.Case.CUSTOM}
_VTK_CELL_TYPE = {2: 5, 3: 10}  # triangle, tetrahedron


@dataclass
class RunConfig:
    command: str = ""
    case: str = ""
    method: str = ""
    dim: int = 0
    levels: tuple = ()
    n: int = 16
    nu: float = 2.0
    alpha: float = 0.2
    beta: float = 0.1
    gamma: float = 0.5
    delta: float = 1.0
    sigma: float = 10.0
    tol: float = 1e-6
    max_iter: int = 25
    quad_order: int = 0
    error_quad_order: int = 6
    out: str = "."
    epsilon: float = 0.01
    rho: float = 0.05
    dt: float = 0.2
    t_end: float = 650.0
    mesh_n: int = 100
    domain_side: float = 300.0
    snapshot_times: tuple = (80.0, 200.0, 650.0)
    line_search: bool = False
    gn_constant: float = 1.0
    f_neg_norm: float = 0.0

    def model_params(self) -> ModelParams:
        return ModelParams(nu=self.nu, alpha=self.alpha, beta=self.beta, gamma=self.gamma, delta=self.delta)

    def space(self) -> SpaceKind:
        if self.method not in _METHODS:
            raise ParameterError(f"method must be one of {sorted(_METHODS)}, got {self.method!r}")
        return _METHODS[self.method]

    def problem_case(self) -> problems.Case:
        if self.case not in _CASES:
            raise ParameterError(f"case must be one of {sorted(_CASES)}, got {self.case!r}")
        return _CASES[self.case]


_FIELD_TYPES = {f.name: f.type for f in dc_fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "tuple":
            parts = [p for p in raw.split(",") if p.strip()]
            if key == "levels":
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ParameterError(f"value {raw!r} for key '{key}' is not a valid {kind}") from exc


def _assign(cfg: RunConfig, key: str, raw: str):
    if key == "command" or key not in _FIELD_TYPES:
        raise ParameterError(f"unknown configuration key '{key}'")
    value = _coerce(key, raw)
    if key == "delta" and value < 1:
        raise ParameterError(f"delta must be >= 1, got {value}")
    if key == "gamma" and not 0 < value < 1:
        warnings.warn(f"gamma = {value} lies outside (0, 1)", stacklevel=3)
    setattr(cfg, key, value)


def parse_config(text: str) -> RunConfig:
    """Parse a flat key=value document into a validated RunConfig."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParameterError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, raw = body.split("=", 1)
        _assign(cfg, key.strip(), raw)
    return cfg


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    for pair in pairs:
        if "=" not in pair:
            raise ParameterError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        _assign(cfg, key.strip(), raw)
    return cfg


def _require(cfg: RunConfig, keys):
    for key in keys:
        if not getattr(cfg, key):
            raise ParameterError(f"missing required key '{key}'")


# ---------------------------------------------------------------------------
# writers


def _fmt_rate(rate) -> str:
    if rate is None:
        return "-"
    if np.isinf(rate):
        return "inf"
    return f"{rate:.4f}"


def write_convergence_csv(report: problems.ConvergenceReport, path):
    """One row per refinement level, errors in 3-significant-digit scientific
    notation and rates with four decimals ("-" on the first level)."""
    if not report.records:
        raise ParameterError("cannot write an empty convergence report")
    sep = "x"
    lines = ["mesh,newton_it,h1_error,rate_h1,l2_error,rate_l2"]
    for rec in report.records:
        mesh_label = sep.join([str(rec.n)] * report.dim)
        lines.append(
            f"{mesh_label},{rec.newton_iters},{rec.h1_error:.2e},{_fmt_rate(rec.eoc_h1)},"
            f"{rec.l2_error:.2e},{_fmt_rate(rec.eoc_l2)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def parse_convergence_csv(path):
    """Read back a table written by :func:`write_convergence_csv`."""
    rows = []
    lines = Path(path).read_text().strip().splitlines()
    for line in lines[1:]:
        mesh_label, it, h1, r1, l2, r2 = line.split(",")
        rows.append(
            {
                "n": int(mesh_label.split("x")[0]),
                "newton_it": int(it),
                "h1_error": float(h1),
                "rate_h1": None if r1 == "-" else float(r1),
                "l2_error": float(l2),
                "rate_l2": None if r2 == "-" else float(r2),
            }
        )
    return rows


def vertex_values(field: DiscreteField) -> np.ndarray:
    """Field values at mesh vertices.

    CR/DG fields are multivalued at vertices; the arithmetic mean of the
    incident-cell values is taken, which is lossy and intended for
    visualization only.
    """
    dofmap = field.dofmap
    mesh = dofmap.mesh
    if dofmap.space is SpaceKind.CFEM_P1:
        return field.coeffs.copy()
    d = mesh.dim
    ref_vertices = np.vstack([np.zeros(d), np.eye(d)])
    vals = basis_values(dofmap.space, ref_vertices)  # (d+1 vertices, d+1 basis)
    cellwise = field.coeffs[dofmap.cell_dofs] @ vals.T  # (nc, d+1)
    out = np.zeros(mesh.n_vertices)
    count = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.cells, cellwise)
    np.add.at(count, mesh.cells, 1.0)
    return out / count


def write_vtk(mesh: Mesh, fields: dict, path, title: str = "gbhfem fields"):
    """Legacy ASCII VTK unstructured grid with one scalar per field."""
    for name, fld in fields.items():
        if fld.dofmap.mesh is not mesh:
            raise ParameterError(f"field '{name}' does not live on the given mesh")
    pts = mesh.vertices
    if mesh.dim == 2:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    nv, nc = mesh.n_vertices, mesh.n_cells
    k = mesh.dim + 1
    out = [
        "# vtk DataFile Version 2.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {nv} double",
    ]
    out.extend(" ".join(f"{c:.10g}" for c in row) for row in pts)
    out.append(f"CELLS {nc} {nc * (k + 1)}")
    out.extend(f"{k} " + " ".join(str(v) for v in cell) for cell in mesh.cells)
    out.append(f"CELL_TYPES {nc}")
    out.extend([str(_VTK_CELL_TYPE[mesh.dim])] * nc)
    if fields:
        out.append(f"POINT_DATA {nv}")
        for name, fld in fields.items():
            out.append(f"SCALARS {name} double")
            out.append("LOOKUP_TABLE default")
            out.extend(f"{v:.10g}" for v in vertex_values(fld))
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------------------
# commands


def _load_config(args) -> RunConfig:
    cfg = parse_config(Path(args.config).read_text()) if args.config else RunConfig()
    apply_overrides(cfg, args.overrides or [])
    if args.out:
        cfg.out = args.out
    return cfg


def _cmd_converge(cfg: RunConfig) -> int:
    _require(cfg, ("case", "method", "dim", "levels"))
    report = problems.run_convergence_study(
        cfg.problem_case(),
        cfg.space(),
        cfg.dim,
        cfg.levels,
        cfg.model_params(),
        sigma=cfg.sigma,
        tol=cfg.tol,
        max_iter=cfg.max_iter,
        quad_order=cfg.quad_order or None,
        error_quad_order=cfg.error_quad_order,
    )
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"convergence_{cfg.method}_{cfg.case}_{cfg.dim}d.csv"
    write_convergence_csv(report, path)
    print(f"wrote {path}")
    print(Path(path).read_text().rstrip())
    return EXIT_OK


def _cmd_solve(cfg: RunConfig) -> int:
    _require(cfg, ("case", "method", "dim"))
    space = cfg.space()
    case = cfg.problem_case()
    p = cfg.model_params()
    mesh = problems.build_structured_mesh(cfg.dim, cfg.n)
    dofmap = problems.build_dofmap(mesh, space)
    problem = problems.make_problem(case, p, cfg.dim, space, sigma=cfg.sigma, quad_order=cfg.quad_order or None)
    uh, report = newton_solve(space, problem, initial_guess(dofmap, problem), cfg.tol, cfg.max_iter)
    triple = analysis.error_norms(uh, problems.exact_handle(case, cfg.dim, p), cfg.error_quad_order)

    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_vtk(mesh, {"u": uh}, out_dir / "solution.vtk", title=f"{cfg.method} {cfg.case} {cfg.dim}d")
    lines = [
        f"method: {cfg.method}",
        f"case: {cfg.case}",
        f"mesh: {'x'.join([str(cfg.n)] * cfg.dim)}",
        f"newton_iterations: {report.iterations}",
        f"final_residual: {report.final_residual:.6e}",
        f"l2_error: {triple.l2:.6e}",
        f"h1_error: {triple.h1_broken:.6e}",
        f"dg_energy_error: {triple.dg_energy:.6e}",
    ]
    if space is SpaceKind.CFEM_P1:
        lhs, bound, holds = analysis.verify_energy_bound(uh, p, problem.forcing)
        lines.append(f"energy_bound: lhs={lhs:.6e} K={bound:.6e} holds={holds}")
    else:
        lines.append("energy_bound: n/a (conforming space only)")
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {out_dir / 'solution.vtk'} and {out_dir / 'summary.txt'}")
    return EXIT_OK


def _cmd_transient(cfg: RunConfig) -> int:
    _require(cfg, ("method",))
    spec = problems.TransientSpec(
        params=cfg.model_params(),
        epsilon=cfg.epsilon,
        rho=cfg.rho,
        dt=cfg.dt,
        t_end=cfg.t_end,
        mesh_n=cfg.mesh_n,
        domain=((0.0, cfg.domain_side), (0.0, cfg.domain_side)),
        discretization=cfg.space(),
        snapshot_times=cfg.snapshot_times,
        sigma=cfg.sigma,
        newton_tol=cfg.tol,
        max_iter=cfg.max_iter,
        line_search=cfg.line_search,
    )
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh = problems.transient_mesh(spec)

    def snapshot(t, u, v):
        path = out_dir / f"transient_t{t:g}.vtk"
        write_vtk(mesh, {"u": u, "v": v}, path, title=f"transient t={t:g}")
        print(f"wrote {path}")

    u, v, _ = problems.run_transient(spec, mesh=mesh, on_snapshot=snapshot)
    print(f"final state: max|u| = {np.abs(u.coeffs).max():.4f}, max|v| = {np.abs(v.coeffs).max():.4f}")
    return EXIT_OK


def _cmd_check_conditions(cfg: RunConfig) -> int:
    dim = cfg.dim or 2
    report = analysis.uniqueness_thresholds(
        cfg.model_params(),
        dim,
        gn_constant=cfg.gn_constant,
        f_neg_norm=cfg.f_neg_norm,
    )
    print(f"lambda1 = {report.lambda1:.12g}")
    for name, thr in report.thresholds.items():
        status = report.satisfied[name]
        verdict = "not applicable" if status is None else ("satisfied" if status else "violated")
        extra = " (indicative: interpolation constant supplied by caller)" if name == "interpolation" else ""
        print(f"uniqueness[{name}]: threshold nu > {thr:.12g} -> {verdict} (nu = {cfg.nu:g}){extra}")
    print(f"K_tilde = {report.K_tilde:.12g}")
    return EXIT_OK


_COMMANDS = {
    "converge": _cmd_converge,
    "solve": _cmd_solve,
    "transient": _cmd_transient,
    "check-conditions": _cmd_check_conditions,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gbhfem",
        description="Finite element toolkit for a nonlinear advection-diffusion-reaction model",
    )
    sub = parser.add_subparsers(dest="command")
    for name in _COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} pipeline")
        sp.add_argument("--config", help="path to a key=value configuration file")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a single configuration key",
        )
    return parser


def cli_main(argv=None) -> int:
    parser = _build_parser()
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    if not argv:
        parser.print_usage()
        print("error: a command is required (converge, solve, transient, check-conditions)")
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = _load_config(args)
        cfg.command = args.command
        return _COMMANDS[args.command](cfg)
    except ParameterError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LinearSolverError, NewtonNonConvergence) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GbhError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(cli_main())
