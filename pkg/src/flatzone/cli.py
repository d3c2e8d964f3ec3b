"""Command-line front end: transform | shoot | solve | threshold | sweep.

Outputs are CSV (17 significant digits, header row, leading '#' lines with
the version and the resolved configuration) and JSON reports. Exit codes:
0 success, 2 configuration error (nothing is written), 3 numerical failure
(only the failure report is written).
"""
from __future__ import annotations

import argparse
import contextlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bvp import ConvergenceFailure, Grid, f_nodes, solve_auto
from .core import DomainError, Nonlinearity, Transform
from .quadrature import QuadratureError
from .serialize import csv_text, dumps, jsonable

CONFIG_ERROR = 2
NUMERICAL_FAILURE = 3


class ConfigError(Exception):
    pass


class NumericalFailure(Exception):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


def _positive(name):
    def conv(text):
        try:
            x = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number, got {text!r}")
        if not (math.isfinite(x) and x > 0):
            raise argparse.ArgumentTypeError(f"{name} must be positive, got {text}")
        return x
    return conv


def _nonneg(text):
    x = float(text)
    if not (math.isfinite(x) and x >= 0):
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {text}")
    return x


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    nl = common.add_argument_group("nonlinearity")
    nl.add_argument("--A", type=_positive("A"), default=1.0)
    nl.add_argument("--gamma", type=_positive("gamma"), default=1.0)
    nl.add_argument("--sigma", type=_positive("sigma"), default=1.0)
    nl.add_argument("--h-table", type=Path, help="CSV with columns s,h")
    dom = common.add_argument_group("domain")
    dom.add_argument("--geometry", choices=["interval", "ball"], default="interval")
    dom.add_argument("--N", type=int, default=1)
    dom.add_argument("--R", type=_positive("R"), default=1.0)
    dom.add_argument("--m", type=int, default=2001)
    data = common.add_argument_group("data")
    data.add_argument("--lambda", dest="lam", type=_positive("lambda"))
    data.add_argument("--lambda-range", help="A:B:STEP, inclusive of B")
    data.add_argument("--f-const", type=_nonneg, default=None)
    data.add_argument("--f-table", type=Path, help="CSV with columns coord,f")
    tol = common.add_argument_group("tolerances")
    tol.add_argument("--tol", type=_positive("tol"), default=1e-8)
    tol.add_argument("--tol-lambda", type=_positive("tol-lambda"), default=None)
    out = common.add_argument_group("output")
    out.add_argument("--out", type=Path, help="CSV output path (default: stdout)")
    out.add_argument("--report", type=Path,
                     help="JSON report path (default: stdout when the CSV goes to a file)")

    p = argparse.ArgumentParser(prog="flatzone", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"flatzone {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    tr = sub.add_parser("transform", parents=[common], help="tabulate H, psi, g, g'")
    tr.add_argument("--samples", type=int, default=11)
    sh = sub.add_parser("shoot", parents=[common], help="shooting profile and radii")
    sh.add_argument("--samples", type=int, default=201)
    sh.add_argument("--ell", type=_positive("ell"), default=None, help="start value (default L)")
    sub.add_parser("solve", parents=[common], help="finite-difference solve with diagnostics")
    sub.add_parser("threshold", parents=[common], help="lambda thresholds and estimate")
    sub.add_parser("sweep", parents=[common], help="solves over a lambda range")
    return p


# -- configuration ---------------------------------------------------------

def _read_table(path: Path):
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}")
    rows = []
    for k, line in enumerate(text.splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ConfigError(f"{path}: expected two columns on line {k + 1}")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError:
            if rows:
                raise ConfigError(f"{path}: non-numeric value on line {k + 1}")
            continue  # header
    if len(rows) < 2:
        raise ConfigError(f"{path}: need at least two rows")
    arr = np.array(rows)
    if np.any(np.diff(arr[:, 0]) <= 0):
        raise ConfigError(f"{path}: first column must be strictly increasing")
    return arr[:, 0], arr[:, 1]


def resolve(args) -> dict:
    """Validated configuration as a plain dict, echoed in every output.

    Output paths are left out so that the same run written to different
    files gives byte-identical contents.
    """
    cfg = {"command": args.command, "version": __version__}
    if args.h_table is not None:
        cfg["nonlinearity"] = {"kind": "table", "path": str(args.h_table), "sigma": args.sigma}
    else:
        cfg["nonlinearity"] = {"kind": "power", "A": args.A, "gamma": args.gamma,
                               "sigma": args.sigma}
    if args.m < 16:
        raise ConfigError("--m must be at least 16")
    if args.N < 1:
        raise ConfigError("--N must be at least 1")
    cfg["grid"] = {"geometry": args.geometry, "N": args.N if args.geometry == "ball" else 1,
                   "R": args.R, "m": args.m}
    if args.f_const is not None and args.f_table is not None:
        raise ConfigError("give either --f-const or --f-table, not both")
    if args.f_table is not None:
        cfg["f"] = {"kind": "table", "path": str(args.f_table)}
    else:
        cfg["f"] = {"kind": "constant", "value": 1.0 if args.f_const is None else args.f_const}
    cfg["lambda"] = args.lam
    cfg["lambda_range"] = None
    if args.lambda_range is not None:
        try:
            a, b, step = (float(x) for x in args.lambda_range.split(":"))
        except ValueError:
            raise ConfigError("--lambda-range must look like A:B:STEP")
        if not (a > 0 and step > 0 and b >= a):
            raise ConfigError("--lambda-range needs 0 < A <= B and STEP > 0")
        cfg["lambda_range"] = {"start": a, "stop": b, "step": step}
    cfg["tol"] = args.tol
    cfg["tol_lambda"] = args.tol_lambda
    for key in ("samples", "ell"):
        if hasattr(args, key):
            cfg[key] = getattr(args, key)
    if cfg.get("samples") is not None and cfg["samples"] < 2:
        raise ConfigError("--samples must be at least 2")
    cfg["deterministic"] = True
    return cfg


def make_nonlinearity(cfg) -> Nonlinearity:
    desc = cfg["nonlinearity"]
    try:
        if desc["kind"] == "table":
            s, h = _read_table(Path(desc["path"]))
            return Nonlinearity.tabulated(s, h, desc["sigma"])
        return Nonlinearity.power(desc["A"], desc["gamma"], desc["sigma"])
    except DomainError as exc:
        raise ConfigError(str(exc))


def make_grid(cfg) -> Grid:
    g = cfg["grid"]
    if g["geometry"] == "ball":
        return Grid.ball(g["N"], g["R"], g["m"])
    return Grid.interval(g["R"], g["m"])


def make_f(cfg, grid: Grid) -> np.ndarray:
    desc = cfg["f"]
    if desc["kind"] == "constant":
        vals = np.full(grid.m, desc["value"])
    else:
        x, y = _read_table(Path(desc["path"]))
        nodes = grid.nodes
        if nodes.min() < x[0] - 1e-12 or nodes.max() > x[-1] + 1e-12:
            raise ConfigError("--f-table does not cover the grid")
        vals = np.interp(nodes, x, y)
    try:
        vals = f_nodes(vals, grid)
    except DomainError as exc:
        raise ConfigError(str(exc))
    if not np.any(vals > 0):
        raise ConfigError("f vanishes identically")
    return vals


def lambda_values(cfg):
    r = cfg["lambda_range"]
    if r is None:
        raise ConfigError("sweep needs --lambda-range")
    count = int(math.floor((r["stop"] - r["start"]) / r["step"] + 1e-9)) + 1
    return [r["start"] + k * r["step"] for k in range(count)]


def _need_lambda(cfg):
    if cfg["lambda"] is None:
        raise ConfigError(f"{cfg['command']} needs --lambda")
    return cfg["lambda"]


# -- commands -------------------------------------------------------------

def _header_lines(cfg) -> str:
    return (f"# flatzone {__version__}\n"
            f"# config {json.dumps(jsonable(cfg), sort_keys=True)}\n")


def cmd_transform(cfg):
    nl = make_nonlinearity(cfg)
    t = Transform(nl)
    k = cfg["samples"]
    # half-open grids s_j = jσ/k, v_j = jL/k keep every row finite
    s = nl.sigma * np.arange(k) / k
    v = t.L * np.arange(k) / k
    with np.errstate(divide="ignore", invalid="ignore"):
        H = nl.H(s)
        psi = t._psi(s)
        g = t._g(v)
        gp = t._g_prime(v)
    block1 = csv_text(["s", "H", "psi"], zip(s, H, psi))
    block2 = csv_text(["v", "g", "gprime"], zip(v, g, gp))
    csv = _header_lines(cfg) + block1 + "\n" + block2
    summary = {"config": cfg, "version": __version__, "L": t.L, "G_L": t.G_L,
               "H_sigma": nl.H_sigma, "regime": t.report.regime,
               "integrability": jsonable(t.report)}
    return csv, summary


def cmd_shoot(cfg):
    from .shooting import DivergenceError, critical_lambda, radius, trace

    nl = make_nonlinearity(cfg)
    t = Transform(nl)
    lam = _need_lambda(cfg)
    ell = t.L if cfg.get("ell") is None else cfg["ell"]
    if not ell <= t.L:
        raise ConfigError(f"--ell must not exceed L = {t.L!r}")
    cfg["ell"] = ell
    R = cfg["grid"]["R"]
    R_L = radius(t, t.L, lam)
    summary = {"config": cfg, "version": __version__, "ell": ell, "lambda": lam,
               "L": t.L, "R_L": R_L, "critical_lambda_for_R": critical_lambda(t, R)}
    try:
        sol = trace(t, ell, lam, cfg["samples"])
        rows = zip(sol.s, sol.v, sol.v_prime)
        summary["R_ell"] = sol.R_ell
    except DivergenceError:
        rows = []
        summary["R_ell"] = math.inf
        summary["note"] = "the profile started at L never reaches zero"
    csv = _header_lines(cfg) + csv_text(["s", "v", "vprime"], rows)
    return csv, summary


def _exact_reference(nl: Nonlinearity, cfg, grid: Grid, lam: float, fv):
    """Error against u = σ(1 - (s/R)²), the explicit critical solution for γ = 1."""
    if nl.kind != "power" or nl.gamma != 1.0 or grid.geometry != "interval":
        return None
    if cfg["f"]["kind"] != "constant":
        return None
    c = cfg["f"]["value"]
    R, sig, A = grid.R, nl.sigma, nl.A
    lam_exact = (2.0 + 4.0 * A) * sig / (c * R * R)
    if abs(lam - lam_exact) > 1e-12 * lam_exact:
        return None
    return {"lambda": lam_exact, "solution": "sigma*(1-(s/R)^2)"}


def _diagnostics(t: Transform, sol, cfg) -> dict:
    from . import diagnostics as dg
    from .bvp import quasilinear_residual

    out = {}
    res_inf, _ = quasilinear_residual(t, sol)
    out["offplateau_residual_inf"] = res_inf
    dm = dg.defect_measure(sol, t)
    out["defect_mass"] = dm.total_mass
    out["divergence_mass"] = dg.divergence_mass(sol)
    if np.any(dm.flat_interior):
        dens = dm.density[dm.flat_interior]
        out["plateau_density_min"] = float(dens.min())
        out["plateau_density_max"] = float(dens.max())
    en = dg.energy_bound_check(sol, t)
    out["energy_bound"] = {"holds": en.holds, "margin": en.margin,
                           "gradient_energy": en.gradient_energy, "datum_mass": en.datum_mass}
    try:
        out["plateau_flux"] = dg.plateau_flux(sol)
    except dg.InapplicableDiagnostic as exc:
        out["plateau_flux"] = {"inapplicable": str(exc)}
    fit = dg.fit_touching_behavior(sol, t)
    out["touching_fit"] = jsonable(fit)
    if fit.applicable and t.source.kind == "power" and t.source.gamma < 2.0:
        f0 = float(sol.f[sol.grid.center])
        if f0 > 0:
            N = sol.grid.N if sol.grid.geometry == "ball" else 1
            out["touching_prediction"] = jsonable(
                dg.curvature_asymptotics(t.source, sol.lam, f0, N))
    return out


def _run_thresholds(t: Transform, fv, grid: Grid) -> dict:
    from .shooting import critical_lambda
    from .thresholds import existence_lower_bound, nonexistence_bound, principal_eigenvalue

    lam1, _ = principal_eigenvalue(fv, grid)
    out = {"lambda1": lam1, "lambda_lower_linear": existence_lower_bound(fv, grid, t.sigma)}
    if t.report.h_integrable:
        out["lambda_ne_upper"] = nonexistence_bound(t, fv, grid)
    if grid.geometry == "interval" and np.all(fv == fv[0]):
        out["critical_lambda_shooting"] = critical_lambda(t, grid.R) / fv[0]
    return out


def cmd_solve(cfg):
    nl = make_nonlinearity(cfg)
    grid = make_grid(cfg)
    fv = make_f(cfg, grid)
    lam = _need_lambda(cfg)
    t = Transform(nl)
    sol = _solve(t, lam, fv, grid, cfg)
    report = {"config": cfg, "version": __version__, "solve": sol.telemetry(),
              "max_u": float(np.max(sol.u)), "max_v": float(np.max(sol.v)), "L": t.L,
              "flat_width": sol.flat_width(), "regime": t.report.regime,
              "thresholds": _run_thresholds(t, fv, grid),
              "diagnostics": _diagnostics(t, sol, cfg)}
    ref = _exact_reference(nl, cfg, grid, lam, fv)
    if ref is not None:
        exact = nl.sigma * (1.0 - (grid.nodes / grid.R) ** 2)
        ref["max_abs_error"] = float(np.max(np.abs(sol.u - exact)))
        report["exact_reference"] = ref
    flat = sol.flat_mask.astype(int)
    rows = [(x, v, u, str(k)) for x, v, u, k in zip(grid.nodes, sol.v, sol.u, flat)]
    csv = _header_lines(cfg) + csv_text(["coord", "v", "u", "flat"], rows)
    return csv, report


def _solve(t, lam, fv, grid, cfg):
    try:
        return solve_auto(t, lam, fv, grid, tol=cfg["tol"])
    except ConvergenceFailure as exc:
        raise NumericalFailure(str(exc), {"lambda": lam, **jsonable(exc.report)})


def cmd_threshold(cfg):
    from .thresholds import ThresholdFailure, threshold_report

    nl = make_nonlinearity(cfg)
    grid = make_grid(cfg)
    fv = make_f(cfg, grid)
    t = Transform(nl)
    try:
        rep = threshold_report(t, fv, grid, tol_lambda=cfg["tol_lambda"], tol=cfg["tol"])
    except ThresholdFailure as exc:
        raise NumericalFailure(str(exc), jsonable(exc.report))
    body = {k: v for k, v in jsonable(rep).items() if v is not None}
    body.update({"config": cfg, "version": __version__})
    return None, body


def cmd_sweep(cfg):
    nl = make_nonlinearity(cfg)
    grid = make_grid(cfg)
    fv = make_f(cfg, grid)
    lams = lambda_values(cfg)
    t = Transform(nl)
    rows = []
    for lam in sorted(lams):
        sol = _solve(t, lam, fv, grid, cfg)
        rows.append((lam, float(np.max(sol.u)), sol.flat_width(),
                     float(sum(sol.newton_iterations))))
    max_u = [r[1] for r in rows]
    monotone = all(b >= a - 1e-8 for a, b in zip(max_u, max_u[1:]))
    csv = _header_lines(cfg) + csv_text(["lambda", "max_u", "flat_width", "iterations"], rows)
    report = {"config": cfg, "version": __version__, "max_u_nondecreasing": monotone,
              "points": len(rows)}
    return csv, report


COMMANDS = {"transform": cmd_transform, "shoot": cmd_shoot, "solve": cmd_solve,
            "threshold": cmd_threshold, "sweep": cmd_sweep}


def _emit(args, csv, report, stdout):
    """Files for the paths given; stdout carries at most one document."""
    stdout_free = True
    if csv is not None:
        if args.out:
            args.out.write_text(csv)
        else:
            stdout.write(csv)
            stdout_free = False
    if report is not None:
        text = dumps(report)
        if args.report:
            args.report.write_text(text)
        elif stdout_free:
            stdout.write(text)


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        with contextlib.redirect_stderr(stderr):
            args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    cfg = None
    try:
        cfg = resolve(args)
        csv, report = COMMANDS[args.command](cfg)
    except (ConfigError, DomainError) as exc:
        stderr.write(f"flatzone: configuration error: {exc}\n")
        return CONFIG_ERROR
    except (NumericalFailure, ConvergenceFailure, QuadratureError, ArithmeticError) as exc:
        failure = {"config": cfg, "version": __version__, "error": str(exc),
                   "details": jsonable(getattr(exc, "report", {}))}
        text = dumps(failure)
        if args.report:
            args.report.write_text(text)
        else:
            stderr.write(text)
        stderr.write(f"flatzone: numerical failure: {exc}\n")
        return NUMERICAL_FAILURE
    _emit(args, csv, report, stdout)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
