"""First-order corrector, homogenization error norms and empirical rate fits."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import stats

from .cell import UnitCellGrid
from .coeffs import ProblemData
from .effective import EffectiveField, build_effective_field
from .finesolve import FineRunSpec, solve_fine
from .macrosolve import MacroMesh, TimeGrid, TransientField, solve_homogenized

log = logging.getLogger(__name__)

__all__ = [
    "IncompatibleError",
    "CorrectorSpec",
    "cutoff",
    "CorrectorGradient",
    "build_corrector_gradient",
    "ErrorRow",
    "error_norms",
    "RateFit",
    "fit_rate",
    "ErrorReport",
    "StudyConfig",
    "run_study",
    "synthetic_report",
]


class IncompatibleError(ValueError):
    pass


@dataclass(frozen=True)
class CorrectorSpec:
    use_cutoff: bool = False


def cutoff(x, box, eps):
    """Smooth boundary cutoff: 0 within ``eps`` of the boundary, 1 beyond ``2 eps``.

    A C^1 smoothstep in the distance, so ``eps |grad tau| <= 1.5``.
    """
    r = np.clip((box.distance_to_boundary(x) - eps) / eps, 0.0, 1.0)
    return r * r * (3.0 - 2.0 * r)


def _time_weights(tgrid, scheme):
    w = np.full(tgrid.steps + 1, tgrid.dt)
    if scheme == "crank-nicolson":
        w[0] = w[-1] = 0.5 * tgrid.dt
    else:
        w[0] = 0.0  # right-endpoint rectangle rule
    return w


def _check_compatible(a: TransientField, b: TransientField):
    if a.mesh.box != b.mesh.box:
        raise IncompatibleError("fine and macro fields live on different domains")
    if a.tgrid != b.tgrid:
        raise IncompatibleError("fine and macro fields use different time grids")


class CorrectorGradient:
    """``G_k = grad u_k0 + grad_y N^i_k du_k0/dx_i + grad_y M_k (u_j0 - u_k0)`` on a fine mesh.

    Evaluated lazily per time step at the quadrature points of ``fine_mesh``.
    Cell data come from ``eff.cells`` (multilinear interpolation between
    macro samples) and are looked up at ``y = frac(x / eps)``.
    """

    def __init__(self, macro: TransientField, fine_mesh, eff: EffectiveField, eps, spec=CorrectorSpec()):
        if eff.cells is None:
            raise ValueError("effective field carries no cell solutions (build with keep_cells=True)")
        if fine_mesh.box != macro.mesh.box:
            raise IncompatibleError("fine mesh and macro mesh cover different domains")
        self.macro = macro
        self.mesh = fine_mesh
        self.eps = eps
        self.spec = spec
        d = fine_mesh.dim
        x = fine_mesh.quad_points.reshape(-1, d)
        self._shape = fine_mesh.quad_points.shape[:-1]
        self.P = macro.mesh.interpolation_matrix(x)
        y = np.mod(x / eps, 1.0)
        idx, w = eff.cell_weights(x)
        npts = len(x)
        gN = np.zeros((2, d, npts, d))
        gM = np.zeros((2, npts, d))
        for s in np.unique(idx):
            rows, cols = np.nonzero(idx == s)
            ws = np.zeros(npts)
            np.add.at(ws, rows, w[rows, cols])
            sel = np.flatnonzero(ws)
            cs = eff.cells[s]
            for k in range(2):
                for i in range(d):
                    gN[k, i, sel] += ws[sel, None] * cs.N[k][i].gradient(y[sel])
                gM[k, sel] += ws[sel, None] * cs.M[k].gradient(y[sel])
        self.gN, self.gM = gN, gM
        self.tau = cutoff(x, fine_mesh.box, eps) if spec.use_cutoff else np.ones(npts)

    def macro_values(self, n):
        """``(u_k0, grad u_k0)`` at the fine quadrature points, shapes ``(2, P)`` and ``(2, P, d)``."""
        u = self.macro.u[:, n]
        grads = self.macro.mesh.recovered_gradient(u)  # (2, nodes, d)
        vals = np.stack([self.P @ u[k] for k in range(2)])
        g = np.stack([np.stack([self.P @ grads[k, :, c] for c in range(self.mesh.dim)], axis=-1) for k in range(2)])
        return vals, g

    def at_step(self, n):
        """Corrector gradients at step ``n``, shape ``(2, ne, nq, d)``."""
        vals, g = self.macro_values(n)
        out = []
        for k in range(2):
            j = 1 - k
            corr = np.einsum("ipc,pi->pc", self.gN[k], g[k]) + self.gM[k] * (vals[j] - vals[k])[:, None]
            out.append(g[k] + self.tau[:, None] * corr)
        return np.stack(out).reshape((2,) + self._shape + (self.mesh.dim,))

    def full(self):
        return np.stack([self.at_step(n) for n in range(self.macro.tgrid.steps + 1)], axis=1)


def build_corrector_gradient(macro, fine_mesh, eff, eps, spec=CorrectorSpec()):
    return CorrectorGradient(macro, fine_mesh, eff, eps, spec)


@dataclass
class ErrorRow:
    epsilon: float
    l2: tuple  # ||u_k^eps - u_k0||_{L2(0,T;H)}
    grad: tuple  # ||grad u_k^eps - G_k||_{L2(0,T;H)}
    energy: tuple  # ||grad u_k^eps||_{L2(0,T;H)}, the L2(0,T;V) norm
    grad_cutoff: tuple | None = None
    cutoff_shift: tuple | None = None  # ||G_k(cutoff) - G_k||_{L2(0,T;H)}

    def as_list(self):
        row = [self.epsilon, *self.l2, *self.grad, *self.energy]
        if self.grad_cutoff is not None:
            row += list(self.grad_cutoff) + list(self.cutoff_shift)
        return row


def _floats(a):
    return tuple(float(v) for v in a)


def error_norms(fine: TransientField, macro: TransientField, G: CorrectorGradient | None = None, epsilon=float("nan"), extra=()):
    """L2(0,T;H) norms of ``u^eps - u_0`` and ``grad u^eps - G`` for both continua.

    The macro solution is interpolated onto the fine quadrature points.  ``G``
    is anything with ``at_step(n) -> (2, ne, nq, d)``; when None the recovered
    macro gradient is used.  ``extra`` lists further
    corrector gradients whose error norms are returned after the main row.
    """
    _check_compatible(fine, macro)
    mesh = fine.mesh
    d = mesh.dim
    P = getattr(G, "P", None)
    if P is None:
        P = macro.mesh.interpolation_matrix(mesh.quad_points.reshape(-1, d))
    shape = mesh.quad_points.shape[:-1]
    wt = _time_weights(fine.tgrid, fine.scheme)
    l2 = np.zeros(2)
    gr = np.zeros(2)
    en = np.zeros(2)
    ex = np.zeros((len(extra), 2))
    sh = np.zeros((len(extra), 2))
    for n in range(fine.tgrid.steps + 1):
        if wt[n] == 0.0:
            continue
        uf = mesh.values_at_quad(fine.u[:, n])
        gf = mesh.gradients_at_quad(fine.u[:, n])
        um = np.stack([(P @ macro.u[k, n]).reshape(shape) for k in range(2)])
        if G is not None:
            gm = G.at_step(n)
        else:
            rg = macro.mesh.recovered_gradient(macro.u[:, n])
            gm = np.stack([np.stack([(P @ rg[k, :, c]).reshape(shape) for c in range(d)], -1) for k in range(2)])
        l2 += wt[n] * mesh.integrate((uf - um) ** 2)
        gr += wt[n] * mesh.integrate(np.sum((gf - gm) ** 2, axis=-1))
        en += wt[n] * mesh.integrate(np.sum(gf**2, axis=-1))
        for e, Ge in enumerate(extra):
            ge = Ge.at_step(n)
            ex[e] += wt[n] * mesh.integrate(np.sum((gf - ge) ** 2, axis=-1))
            sh[e] += wt[n] * mesh.integrate(np.sum((gm - ge) ** 2, axis=-1))
    row = ErrorRow(float(epsilon), _floats(np.sqrt(l2)), _floats(np.sqrt(gr)), _floats(np.sqrt(en)))
    if extra:
        row.grad_cutoff = _floats(np.sqrt(ex[0]))
        row.cutoff_shift = _floats(np.sqrt(sh[0]))
    return row


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    residual: float
    stderr: float
    band: tuple  # 95% confidence interval of the slope
    exact: bool = False

    def to_dict(self):
        return asdict(self)


def fit_rate(eps, errors):
    """Least-squares slope of ``log(error)`` against ``log(eps)``.

    Zero errors give a degenerate fit flagged ``exact`` with ``slope = inf``.
    """
    eps = np.asarray(eps, dtype=float)
    err = np.asarray(errors, dtype=float)
    if len(eps) < 3:
        raise ValueError("a rate fit needs at least three points")
    if np.any(err <= 0.0):
        if np.all(err == 0.0):
            return RateFit(math.inf, -math.inf, 0.0, 0.0, (math.inf, math.inf), exact=True)
        raise ValueError("errors must be positive for a log-log fit")
    lx, ly = np.log(eps), np.log(err)
    fit = stats.linregress(lx, ly)
    resid = float(np.sqrt(np.sum((ly - (fit.intercept + fit.slope * lx)) ** 2)))
    half = float(stats.t.ppf(0.975, len(eps) - 2) * fit.stderr) if len(eps) > 2 else math.inf
    return RateFit(float(fit.slope), float(fit.intercept), resid, float(fit.stderr),
                   (float(fit.slope) - half, float(fit.slope) + half))


@dataclass
class ErrorReport:
    rows: list
    fits: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: -r.epsilon)

    @property
    def passed(self):
        return all(self.checks.values())

    @property
    def eps(self):
        return np.array([r.epsilon for r in self.rows])

    def column(self, name, k):
        return np.array([getattr(r, name)[k] for r in self.rows])

    def header(self):
        h = ["epsilon", "l2_u1", "l2_u2", "grad_u1", "grad_u2", "energy_u1", "energy_u2"]
        if self.rows and self.rows[0].grad_cutoff is not None:
            h += ["grad_cutoff_u1", "grad_cutoff_u2", "cutoff_shift_u1", "cutoff_shift_u2"]
        return h

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header())
            for r in self.rows:
                w.writerow([repr(float(v)) for v in r.as_list()])

    def to_dict(self):
        return {
            "columns": self.header(),
            "rows": [r.as_list() for r in self.rows],
            "fits": {k: v.to_dict() for k, v in self.fits.items()},
            "checks": self.checks,
            "passed": self.passed,
            "flags": self.flags,
            "info": self.info,
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    def write_loglog(self, directory):
        """One two-column ``epsilon value`` file per norm."""
        directory = Path(directory)
        cols = self.header()
        table = np.array([r.as_list() for r in self.rows])
        paths = []
        for j, name in enumerate(cols[1:], start=1):
            p = directory / f"loglog_{name}.dat"
            with open(p, "w") as fh:
                for e, v in zip(table[:, 0], table[:, j]):
                    fh.write(f"{float(e)!r} {float(v)!r}\n")
            paths.append(p)
        return paths


@dataclass(frozen=True)
class StudyConfig:
    eps: tuple
    rho: int = 16
    cell_n: int | None = None  # default: rho (cell grid aligned with the fine mesh)
    macro_n: int | None = None
    dt: float = 1e-3
    scheme: str = "implicit-euler"
    cutoff: bool = False
    jobs: int = 1
    tol_lin: float = 1e-10
    fine_n: int | None = None  # common fine mesh for all epsilons (default: h = eps / rho)
    macro_samples: int = 9
    min_slope: float = 0.4
    bound_factor: float = 2.0
    floor_fraction: float = 0.2

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps)
        if len(eps) < 3:
            raise ValueError("a study needs at least three epsilon values")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon list must be strictly decreasing")
        object.__setattr__(self, "eps", eps)

    def resolved_cell_n(self):
        n = self.cell_n if self.cell_n is not None else self.rho
        return max(4, n + (n % 2))

    def resolved_macro_n(self, data):
        if self.macro_n is not None:
            return self.macro_n
        return int(math.ceil(self.rho * float(np.max(data.domain.lengths)) / min(self.eps) / 2))


def _fine_row(args):
    data, eps, cfg, macro, eff = args
    spec = FineRunSpec(eps, data, macro.tgrid, n=cfg.fine_n, rho=cfg.rho)
    fine = solve_fine(spec, cfg.scheme, cfg.tol_lin, check=False)
    G = CorrectorGradient(macro, fine.mesh, eff, eps, CorrectorSpec(False))
    extra = (CorrectorGradient(macro, fine.mesh, eff, eps, CorrectorSpec(True)),) if cfg.cutoff else ()
    return error_norms(fine, macro, G, eps, extra)


def _floor_estimate(data, eff, cfg, tgrid, n, sources, fine_mesh):
    """Richardson-style estimate of the macro gradient error at ``n`` elements per axis."""
    coarse = max(2, n // 2)
    u_n = solve_homogenized(eff, sources, data.initial, MacroMesh(data.domain, n), tgrid, cfg.scheme, cfg.tol_lin)
    u_c = solve_homogenized(eff, sources, data.initial, MacroMesh(data.domain, coarse), tgrid, cfg.scheme, cfg.tol_lin)
    mesh = fine_mesh
    d = mesh.dim
    pts = mesh.quad_points.reshape(-1, d)
    Pn, Pc = u_n.mesh.interpolation_matrix(pts), u_c.mesh.interpolation_matrix(pts)
    shape = mesh.quad_points.shape[:-1]
    wt = _time_weights(tgrid, cfg.scheme)
    acc = 0.0
    for s in range(tgrid.steps + 1):
        if wt[s] == 0.0:
            continue
        gn = u_n.mesh.recovered_gradient(u_n.u[:, s])
        gc = u_c.mesh.recovered_gradient(u_c.u[:, s])
        diff = np.stack([np.stack([(Pn @ gn[k, :, c] - Pc @ gc[k, :, c]).reshape(shape) for c in range(d)], -1)
                         for k in range(2)])
        acc += wt[s] * float(np.max(mesh.integrate(np.sum(diff**2, axis=-1))))
    # the coarse/fine difference overestimates the fine-mesh error for any order >= 1
    return math.sqrt(acc)


def run_study(data: ProblemData, cfg: StudyConfig):
    """Fine solves over the epsilon sweep against one homogenized solve; rate fits and checks."""
    data.check()
    tgrid = TimeGrid.from_dt(data.horizon, cfg.dt)
    grid = UnitCellGrid(data.dim, cfg.resolved_cell_n())
    lattice = cfg.macro_samples if data.depends_on_x else 1
    eff = build_effective_field(data, grid, lattice=lattice, jobs=cfg.jobs, keep_cells=True, check=False)
    macro_n = cfg.resolved_macro_n(data)
    mesh = MacroMesh(data.domain, macro_n)
    sources = data.sources()
    macro = solve_homogenized(eff, sources, data.initial, mesh, tgrid, cfg.scheme, cfg.tol_lin)
    args = [(data, e, cfg, macro, eff) for e in cfg.eps]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            rows = list(pool.map(_fine_row, args))
    else:
        rows = [_fine_row(a) for a in args]
    report = ErrorReport(rows)
    report.info = {
        "cell_n": grid.n,
        "macro_n": macro_n,
        "rho": cfg.rho,
        "dt": tgrid.dt,
        "steps": tgrid.steps,
        "scheme": cfg.scheme,
        "effective": eff.data[0].to_dict() if len(eff.data) == 1 else None,
    }
    eps = report.eps
    for k in range(2):
        report.fits[f"grad_u{k + 1}"] = fit_rate(eps, report.column("grad", k))
        report.fits[f"l2_u{k + 1}"] = fit_rate(eps, report.column("l2", k))
        if cfg.cutoff:
            report.fits[f"grad_cutoff_u{k + 1}"] = fit_rate(eps, report.column("grad_cutoff", k))
            report.fits[f"cutoff_shift_u{k + 1}"] = fit_rate(eps, report.column("cutoff_shift", k))

    degenerate = not data.oscillatory
    if degenerate:
        report.flags.append("degenerate: no oscillation")
    else:
        for k in range(2):
            report.checks[f"slope_grad_u{k + 1}>={cfg.min_slope}"] = bool(report.fits[f"grad_u{k + 1}"].slope >= cfg.min_slope)
            l2 = report.column("l2", k)
            report.checks[f"l2_u{k + 1}_monotone"] = bool(np.all(np.diff(l2) < 0))
    total = report.column("energy", 0) + report.column("energy", 1)
    report.checks["uniform_bound"] = bool(np.all(total <= cfg.bound_factor * total[0]) and np.all(total >= total[0] / cfg.bound_factor))
    if not degenerate:
        fm = FineRunSpec(min(cfg.eps), data, tgrid, n=cfg.fine_n, rho=cfg.rho).mesh()
        floor = _floor_estimate(data, eff, cfg, tgrid, macro_n, sources, fm)
        smallest = min(r.grad[k] for r in report.rows[-1:] for k in range(2))
        report.info["macro_floor_estimate"] = floor
        report.info["smallest_eps_grad_error"] = smallest
        report.checks["discretization_floor"] = bool(floor <= cfg.floor_fraction * smallest)
    return report


def synthetic_report(eps, constant=1.0, exponent=0.5, min_slope=0.4):
    """Report with injected errors ``constant * eps**exponent`` (test hook for the CLI)."""
    rows = []
    for e in eps:
        v = constant * e**exponent
        rows.append(ErrorRow(float(e), (v, v), (v, v), (1.0, 1.0)))
    rep = ErrorReport(rows)
    for k in range(2):
        rep.fits[f"grad_u{k + 1}"] = fit_rate(rep.eps, rep.column("grad", k))
        rep.checks[f"slope_grad_u{k + 1}>={min_slope}"] = bool(rep.fits[f"grad_u{k + 1}"].slope >= min_slope)
    rep.flags.append("synthetic")
    return rep
