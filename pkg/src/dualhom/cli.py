"""Command-line front end.

Exit codes: 0 success, 2 invalid input or configuration, 3 solver failure,
4 acceptance threshold not met (outputs are still written).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .cell import CoercivityError, SolvabilityError, UnitCellGrid
from .coeffs import InvalidProblemError, load_problem, validate
from .effective import CellCache, build_effective_field, effective_point
from .expression import EvaluationError, ExpressionError
from .finesolve import FineRunSpec, ResolutionError, solve_fine
from .linalg import SolverError
from .macrosolve import AssemblyError, MacroMesh, PecletError, TimeGrid, l2_error, manufactured_case, solve_homogenized
from .verify import ErrorReport, StudyConfig, fit_rate, run_study, synthetic_report

log = logging.getLogger("dualhom")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_THRESHOLD = 0, 2, 3, 4

_INVALID = (InvalidProblemError, ExpressionError, EvaluationError, CoercivityError, SolvabilityError,
            ResolutionError, PecletError, FileNotFoundError, ValueError)
_SOLVER = (SolverError, AssemblyError)


class Run:
    """Output directory, config hash and timings shared by one invocation."""

    def __init__(self, args, argv):
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        h = hashlib.sha256()
        if getattr(args, "config", None) and Path(args.config).is_file():
            h.update(Path(args.config).read_bytes())
        opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
        h.update(json.dumps(opts, sort_keys=True, default=str).encode())
        self.config_hash = h.hexdigest()
        self.command = args.command
        self.options = opts
        self.timings = {}

    @contextmanager
    def timed(self, label):
        t0 = time.perf_counter()
        yield
        self.timings[label] = time.perf_counter() - t0

    def metadata(self, path, **extra):
        """Write ``<path>.meta.json`` next to an output file."""
        path = Path(path)
        doc = {
            "file": path.name,
            "command": self.command,
            "config_hash": self.config_hash,
            "version": __version__,
            "options": self.options,
            "timings": dict(self.timings),
        }
        doc.update(extra)
        Path(str(path) + ".meta.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable))

    def write_json(self, name, doc, **extra):
        path = self.out / name
        path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable))
        self.metadata(path, **extra)
        return path


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _eps_list(text):
    vals = []
    for tok in str(text).split(","):
        tok = tok.strip()
        if "/" in tok:
            num, den = tok.split("/")
            vals.append(float(num) / float(den))
        elif tok:
            vals.append(float(tok))
    return vals


def _load(args):
    if not args.config:
        raise ValueError("--config is required")
    data, run = load_problem(args.config)
    # problem-file run table supplies defaults for unset flags
    for key in ("eps", "rho", "cell_n", "macro_n", "dt", "scheme", "jobs", "tol_lin", "cutoff"):
        if getattr(args, key, None) is None and key in run:
            val = run[key]
            setattr(args, key, _eps_list(",".join(map(str, val))) if key == "eps" and isinstance(val, list) else val)
    if isinstance(getattr(args, "eps", None), str):
        args.eps = _eps_list(args.eps)
    return data


def _opt(args, key, default):
    v = getattr(args, key, None)
    return default if v is None else v


def _tgrid(data, args):
    return TimeGrid.from_dt(data.horizon, _opt(args, "dt", 1e-3))


def cmd_validate(args, run):
    data = _load(args)
    rep = validate(data)
    run.write_json("validation.json", rep.to_dict())
    for c in rep.checks:
        print(f"{'ok  ' if c.passed else 'FAIL'} {c.name}: worst {c.worst_value:.6g}")
    if not rep.ok:
        print("validation failed", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def _points(args, data):
    if args.x:
        pts = np.array([[float(v) for v in p.split(",")] for p in args.x])
    else:
        pts = np.array([0.5 * (np.asarray(data.domain.lower) + np.asarray(data.domain.upper))])
    if pts.shape[1] != data.dim:
        raise ValueError(f"macro points must have {data.dim} coordinates")
    return pts


def cmd_cell(args, run):
    data = _load(args)
    data.check()
    grid = UnitCellGrid(data.dim, _opt(args, "cell_n", 64))
    cache = CellCache(run.out / "cache")
    summary = []
    for j, x in enumerate(_points(args, data)):
        with run.timed(f"cell_{j}"):
            cells = cache.get(data, x, grid, "nodal")
            pt, cells = effective_point(data, x, grid, cells=cells)
            cache.put(data, x, grid, "nodal", cells)
        csv_path = run.out / f"cell_{j}.csv"
        cells.to_csv(csv_path)
        run.metadata(csv_path, macro_point=list(x))
        bin_path = run.out / f"cell_{j}.bin"
        cells.to_binary(bin_path)
        run.metadata(bin_path, macro_point=list(x), fields=list(cells.fields()))
        fields = cells.fields()
        summary.append({
            "macro_point": list(map(float, x)),
            "n": grid.n,
            "max_abs": {k: float(np.max(np.abs(f.values))) for k, f in fields.items()},
            "means": {k: f.mean() for k, f in fields.items()},
            "iterations": cells.iterations,
            "beta": pt.beta,
            "effective": pt.to_dict(),
            "checks": pt.checks(),
        })
    run.write_json("cell_summary.json", summary)
    for s in summary:
        print(f"x = {s['macro_point']}: beta = {s['beta']:.6g}, max|N| = "
              f"{max(v for k, v in s['max_abs'].items() if k.startswith('N')):.3g}")
    return EXIT_OK


def _effective(data, args, run, lattice=None, points=None, keep_cells=False):
    grid = UnitCellGrid(data.dim, _opt(args, "cell_n", 64))
    if lattice is None and points is None:
        lattice = getattr(args, "lattice", None) or (9 if data.depends_on_x else 1)
    with run.timed("effective"):
        return build_effective_field(data, grid, lattice=lattice, points=points, jobs=_opt(args, "jobs", 1),
                                     cache=CellCache(run.out / "cache"), keep_cells=keep_cells)


def cmd_effective(args, run):
    data = _load(args)
    data.check()
    eff = _effective(data, args, run)
    path = run.out / "effective.json"
    eff.to_json(path)
    checks = eff.all_checks()
    run.metadata(path, checks=checks)
    ok = all(all(c.values()) for c in checks) if isinstance(checks, list) else all(checks.values())
    p = eff.data[0]
    print(f"kappa*_1 = {np.asarray(p.kappa_star[0]).tolist()}, beta = {p.beta:.6g}")
    return EXIT_OK if ok else EXIT_THRESHOLD


def _write_field(run, name, field, **extra):
    csv_path = run.out / f"{name}.csv"
    field.to_csv(csv_path)
    run.metadata(csv_path, **extra)
    bin_path = run.out / f"{name}.bin"
    field.to_binary(bin_path)
    run.metadata(bin_path, **extra)


def _summary(field):
    return {
        "max_abs_u1": float(np.max(np.abs(field.u[0]))),
        "max_abs_u2": float(np.max(np.abs(field.u[1]))),
        "max_abs_u1_minus_u2": float(np.max(np.abs(field.u[0] - field.u[1]))),
    }


def _manufactured(data, args, run, eff, tgrid):
    """Spatial order on four nested meshes for a manufactured exact solution."""
    mc = manufactured_case(eff, data.domain)
    n = _opt(args, "macro_n", 64)
    ns = [max(2, n // 8), max(2, n // 4), max(2, n // 2), n]
    errs = []
    with run.timed("manufactured"):
        for m in ns:
            f = solve_homogenized(eff, mc.sources(), mc.initial(), MacroMesh(data.domain, m), tgrid,
                                  _opt(args, "scheme", "ie"), _opt(args, "tol_lin", 1e-10))
            errs.append(l2_error(f, mc.exact))
    hs = [float(np.max(data.domain.lengths)) / m for m in ns]
    fit = fit_rate(hs, errs)
    return {"meshes": ns, "errors": errs, "spatial_order": fit.slope}, f


def cmd_homogenize(args, run):
    data = _load(args)
    data.check()
    tgrid = _tgrid(data, args)
    eff = _effective(data, args, run)
    extra = {}
    if args.manufactured:
        mms, field = _manufactured(data, args, run, eff, tgrid)
        extra["manufactured"] = mms
        print(f"manufactured spatial order {mms['spatial_order']:.3f}")
    else:
        with run.timed("solve"):
            field = solve_homogenized(eff, data.sources(), data.initial, MacroMesh(data.domain, _opt(args, "macro_n", 64)),
                                      tgrid, _opt(args, "scheme", "ie"), _opt(args, "tol_lin", 1e-10))
    extra.update(_summary(field))
    _write_field(run, "homogenized", field, **extra)
    run.write_json("homogenized_summary.json", extra)
    return EXIT_OK


def cmd_fine(args, run):
    data = _load(args)
    data.check()
    eps = _opt(args, "eps", [1 / 16])
    eps = eps[0] if isinstance(eps, list) else float(eps)
    spec = FineRunSpec(eps, data, _tgrid(data, args), rho=_opt(args, "rho", 16))
    with run.timed("solve"):
        field = solve_fine(spec, _opt(args, "scheme", "ie"), _opt(args, "tol_lin", 1e-10), check=False)
    extra = {"epsilon": eps, "n": list(spec.n), **_summary(field)}
    _write_field(run, "fine", field, **extra)
    run.write_json("fine_summary.json", extra)
    return EXIT_OK


def _print_report(rep: ErrorReport):
    print("  ".join(f"{h:>14s}" for h in rep.header()))
    for r in rep.rows:
        print("  ".join(f"{v:14.6e}" for v in r.as_list()))
    for name, fit in rep.fits.items():
        if fit.exact:
            print(f"{name}: exact")
        else:
            print(f"{name}: slope {fit.slope:.3f} (95% band {fit.band[0]:.3f}..{fit.band[1]:.3f})")
    for flag in rep.flags:
        print(f"flag: {flag}")
    for name, ok in rep.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")


def _write_report(run, rep):
    rep.to_csv(run.out / "report.csv")
    run.metadata(run.out / "report.csv")
    rep.to_json(run.out / "report.json")
    run.metadata(run.out / "report.json")
    for p in rep.write_loglog(run.out):
        run.metadata(p)


def cmd_study(args, run):
    if args.synthetic_rate is not None:
        eps = _eps_list(args.eps) if isinstance(args.eps, str) else (args.eps or [1 / 8, 1 / 16, 1 / 32, 1 / 64])
        rep = synthetic_report(eps, exponent=args.synthetic_rate)
    else:
        data = _load(args)
        if not args.eps:
            raise ValueError("study needs --eps")
        cfg = StudyConfig(
            eps=tuple(args.eps),
            rho=_opt(args, "rho", 16),
            cell_n=args.cell_n,
            macro_n=args.macro_n,
            dt=_opt(args, "dt", 1e-3),
            scheme=_opt(args, "scheme", "ie"),
            cutoff=bool(args.cutoff),
            jobs=_opt(args, "jobs", 1),
            tol_lin=_opt(args, "tol_lin", 1e-10),
            fine_n=args.fine_n,
        )
        with run.timed("study"):
            rep = run_study(data, cfg)
    _write_report(run, rep)
    _print_report(rep)
    return EXIT_OK if rep.passed else EXIT_THRESHOLD


def cmd_report(args, run):
    src = Path(args.report) if args.report else run.out / "report.json"
    if not src.is_file():
        raise FileNotFoundError(f"file not found: {src}")
    doc = json.loads(src.read_text())
    print("  ".join(f"{h:>14s}" for h in doc["columns"]))
    for r in doc["rows"]:
        print("  ".join(f"{v:14.6e}" for v in r))
    for name, fit in doc["fits"].items():
        print(f"{name}: " + ("exact" if fit["exact"] else f"slope {fit['slope']:.3f}"))
    for name, ok in doc["checks"].items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if doc["passed"] else EXIT_THRESHOLD


def build_parser():
    p = argparse.ArgumentParser(prog="dualhom", description="Homogenization toolkit for dual-continuum diffusion.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="problem file (YAML)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--cell-n", type=int, help="cell grid elements per axis")
        sp.add_argument("--jobs", type=int, help="parallel worker processes")
        sp.add_argument("--tol-lin", type=float, help="relative linear-solver tolerance")
        sp.add_argument("-v", "--verbose", action="store_true")

    def transient(sp):
        sp.add_argument("--dt", type=float, help="time step")
        sp.add_argument("--scheme", choices=["ie", "cn"], help="implicit Euler or Crank-Nicolson")
        sp.add_argument("--macro-n", type=int, help="macro mesh elements per axis")

    sp = sub.add_parser("validate", help="check coercivity and exchange solvability")
    common(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("cell", help="solve cell problems at macro points")
    common(sp)
    sp.add_argument("--x", action="append", help="macro point as comma list (repeatable)")
    sp.set_defaults(func=cmd_cell)

    sp = sub.add_parser("effective", help="effective coefficients on a macro lattice")
    common(sp)
    sp.add_argument("--lattice", type=int, help="macro samples per axis")
    sp.set_defaults(func=cmd_effective)

    sp = sub.add_parser("homogenize", help="solve the homogenized system")
    common(sp)
    transient(sp)
    sp.add_argument("--manufactured", action="store_true", help="manufactured-solution spatial order study")
    sp.set_defaults(func=cmd_homogenize)

    sp = sub.add_parser("fine", help="solve the two-scale system at one epsilon")
    common(sp)
    transient(sp)
    sp.add_argument("--eps", type=_eps_list, help="epsilon (first entry used)")
    sp.add_argument("--rho", type=int, help="fine elements per period")
    sp.set_defaults(func=cmd_fine)

    sp = sub.add_parser("study", help="epsilon sweep with error norms and rate fits")
    common(sp)
    transient(sp)
    sp.add_argument("--eps", type=_eps_list, help="comma list, strictly decreasing")
    sp.add_argument("--rho", type=int, help="fine elements per period")
    sp.add_argument("--cutoff", action="store_true", default=None, help="also report the boundary-cutoff corrector")
    sp.add_argument("--fine-n", type=int, help=argparse.SUPPRESS)
    sp.add_argument("--synthetic-rate", type=float, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_study)

    sp = sub.add_parser("report", help="print a stored study report")
    sp.add_argument("--out", default="out")
    sp.add_argument("--config", help=argparse.SUPPRESS)
    sp.add_argument("--report", help="report.json path (default: <out>/report.json)")
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run = Run(args, argv)
        return args.func(args, run)
    except _SOLVER as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except _INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
