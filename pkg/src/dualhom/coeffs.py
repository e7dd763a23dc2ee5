"""Two-scale problem data: coefficient fields, validation and problem files."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from scipy.interpolate import RegularGridInterpolator

from .expression import Node, evaluate, free_variables, parse_expression, serialize

__all__ = [
    "Box",
    "ExpressionField",
    "SampledField",
    "ProblemData",
    "Check",
    "ValidationReport",
    "InvalidProblemError",
    "gauss_cell_points",
    "validate",
    "load_problem",
    "read_grid_file",
    "write_grid_file",
]

DEFAULT_TOL_MEAN_EXPR = 1e-10
DEFAULT_TOL_MEAN_SAMPLED = 1e-8


class InvalidProblemError(ValueError):
    """Raised by solvers handed data that fails validation."""

    def __init__(self, report: "ValidationReport"):
        failed = ", ".join(c.name for c in report.checks if not c.passed)
        super().__init__(f"problem data failed validation: {failed}")
        self.report = report


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi) or not all(h > l for l, h in zip(lo, hi)):
            raise ValueError(f"degenerate box {lo} x {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return len(self.lower)

    @property
    def lengths(self):
        return np.subtract(self.upper, self.lower)

    @property
    def volume(self):
        return float(np.prod(self.lengths))

    def lattice(self, n):
        """``n`` points per axis including the faces, shape ``(n**d, d)``."""
        axes = [np.linspace(l, h, n) for l, h in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def distance_to_boundary(self, x):
        x = np.asarray(x, dtype=float)
        return np.minimum(x - self.lower, np.subtract(self.upper, x)).min(axis=-1)


def _bind(x, y, t, dim):
    env = {"t": t}
    if x is not None:
        x = np.asarray(x, dtype=float)
        for k in range(dim):
            env[f"x{k + 1}"] = x[..., k]
    if y is not None:
        y = np.asarray(y, dtype=float)
        for k in range(dim):
            env[f"y{k + 1}"] = y[..., k]
    return env


def _broadcast_shape(x, y):
    shapes = [np.shape(a)[:-1] for a in (x, y) if a is not None]
    return np.broadcast_shapes(*shapes) if shapes else ()


@dataclass(frozen=True)
class ExpressionField:
    """Field given by a parsed expression in ``t``, ``x1..xd`` and ``y1..yd``."""

    expr: Node
    dim: int
    source: str = ""

    @classmethod
    def parse(cls, text, dim):
        text = str(text)
        return cls(parse_expression(text, dim), dim, text)

    @classmethod
    def constant(cls, value, dim):
        return cls.parse(repr(float(value)), dim)

    @property
    def variables(self):
        return free_variables(self.expr)

    @property
    def depends_on_x(self):
        return any(v.startswith("x") for v in self.variables)

    @property
    def depends_on_y(self):
        return any(v.startswith("y") for v in self.variables)

    @property
    def depends_on_t(self):
        return "t" in self.variables

    def fingerprint(self):
        return hashlib.sha256(f"expr:{self.dim}:{serialize(self.expr)}".encode()).hexdigest()

    def evaluate(self, x=None, y=None, t=0.0):
        out = evaluate(self.expr, _bind(x, y, t, self.dim))
        return np.broadcast_to(out, _broadcast_shape(x, y)).copy()

    def __call__(self, x=None, y=None, t=0.0):
        return self.evaluate(x, y, t)

    def cell_mean(self, x, resolution):
        """Cell average over ``Y`` at macro point ``x`` by composite 2-point Gauss."""
        pts, w = gauss_cell_points(self.dim, resolution)
        return float(np.dot(self.evaluate(np.asarray(x, float)[None, :], pts), w))


@dataclass(frozen=True, eq=False)
class SampledField:
    """Field sampled on a uniform lattice over ``domain`` x ``[0,1)^d``.

    ``values`` has shape ``xshape + yshape``.  Along x the lattice includes
    both faces of the box and an axis of length 1 means "constant in that
    direction"; along y the lattice is periodic, ``n`` samples at ``j/n``.
    An empty ``yshape`` means the field does not depend on y.  Evaluation is
    multilinear with periodic wrap in y and clamping in x.
    """

    values: np.ndarray
    domain: Box
    has_y: bool = True

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        d = self.domain.dim
        if vals.ndim != d * (2 if self.has_y else 1):
            raise ValueError(f"sampled field needs {d} x-axes and {d if self.has_y else 0} y-axes")
        if not np.all(np.isfinite(vals)):
            raise ValueError("sampled field contains non-finite values")
        object.__setattr__(self, "values", vals)
        axes, data = [], vals
        for k in range(d):
            nk = vals.shape[k]
            if nk == 1:
                data = np.concatenate([data, data], axis=k)
                axes.append(np.array([self.domain.lower[k], self.domain.upper[k]]))
            else:
                axes.append(np.linspace(self.domain.lower[k], self.domain.upper[k], nk))
        if self.has_y:
            for k in range(d):
                ax = d + k
                nk = vals.shape[ax]
                first = np.take(data, [0], axis=ax)
                data = np.concatenate([data, first], axis=ax)
                axes.append(np.arange(nk + 1) / nk)
        object.__setattr__(self, "_interp", RegularGridInterpolator(tuple(axes), data))

    @property
    def dim(self):
        return self.domain.dim

    @property
    def depends_on_x(self):
        return any(n > 1 for n in self.values.shape[: self.dim])

    @property
    def depends_on_y(self):
        return self.has_y and any(n > 1 for n in self.values.shape[self.dim :])

    depends_on_t = False

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(repr((self.domain, self.has_y, self.values.shape)).encode())
        h.update(np.ascontiguousarray(self.values).tobytes())
        return h.hexdigest()

    def evaluate(self, x=None, y=None, t=0.0):
        d = self.dim
        shape = _broadcast_shape(x, y)
        if x is None:
            x = np.asarray(self.domain.lower)
        xb = np.clip(
            np.broadcast_to(np.asarray(x, float), shape + (d,)), self.domain.lower, self.domain.upper
        )
        pts = [xb]
        if self.has_y:
            if y is None:
                raise ValueError("field depends on y but no y given")
            pts.append(np.mod(np.broadcast_to(np.asarray(y, float), shape + (d,)), 1.0))
        p = np.concatenate(pts, axis=-1).reshape(-1, len(pts) * d)
        return self._interp(p).reshape(shape)

    def __call__(self, x=None, y=None, t=0.0):
        return self.evaluate(x, y, t)

    def cell_mean(self, x, resolution=None):
        """Exact cell average of the periodic multilinear interpolant at ``x``."""
        if not self.has_y:
            return float(self.evaluate(np.asarray(x, float)))
        d = self.dim
        ny = self.values.shape[d:]
        grids = np.meshgrid(*[np.arange(n) / n for n in ny], indexing="ij")
        y = np.stack([g.ravel() for g in grids], axis=-1)
        return float(np.mean(self.evaluate(np.asarray(x, float)[None, :], y)))


def gauss_cell_points(dim, n):
    """Composite 2-point Gauss rule on ``n**dim`` cells of ``[0,1)^dim``."""
    g = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])
    one = ((np.arange(n)[:, None] + g[None, :]) / n).ravel()
    grids = np.meshgrid(*([one] * dim), indexing="ij")
    pts = np.stack([m.ravel() for m in grids], axis=-1)
    w = np.full(len(pts), 1.0 / len(pts))
    return pts, w


@dataclass(frozen=True)
class ProblemData:
    """Data of the two-scale dual-continuum problem.

    ``kappa``, ``capacity`` and ``exchange`` are functions of ``(x, y)``;
    ``source`` is a function of ``(t, x)`` (a single field, or a pair for the
    two continua); ``initial`` are functions of ``x``.
    """

    domain: Box
    kappa: tuple
    capacity: tuple
    exchange: object
    source: object
    initial: tuple
    horizon: float = 1.0

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon T must be positive")
        if len(self.kappa) != 2 or len(self.capacity) != 2 or len(self.initial) != 2:
            raise ValueError("kappa, capacity and initial need one entry per continuum")

    @property
    def dim(self):
        return self.domain.dim

    @property
    def cell_fields(self):
        return (*self.kappa, *self.capacity, self.exchange)

    @property
    def depends_on_x(self):
        return any(f.depends_on_x for f in self.cell_fields)

    @property
    def oscillatory(self):
        return any(f.depends_on_y for f in self.cell_fields)

    def sources(self):
        if isinstance(self.source, (tuple, list)):
            return tuple(self.source)
        return (self.source, self.source)

    def fingerprint(self):
        h = hashlib.sha256()
        for f in self.cell_fields:
            h.update(f.fingerprint().encode())
        return h.hexdigest()

    def check(self, resolution=8):
        """Validate at a cheap resolution and raise if anything fails."""
        report = validate(self, resolution=resolution)
        if not report.ok:
            raise InvalidProblemError(report)
        return report

    @classmethod
    def from_expressions(
        cls,
        dim,
        kappa,
        capacity=("1", "1"),
        exchange="0",
        source="0",
        initial=("0", "0"),
        domain=None,
        horizon=1.0,
    ):
        """Build problem data from expression strings (convenience for tests and scripts)."""
        f = lambda s: ExpressionField.parse(s, dim)
        if isinstance(kappa, str):
            kappa = (kappa, kappa)
        if isinstance(source, (tuple, list)):
            src = tuple(f(s) for s in source)
        else:
            src = f(source)
        return cls(
            domain=domain or Box((0.0,) * dim, (1.0,) * dim),
            kappa=tuple(f(s) for s in kappa),
            capacity=tuple(f(s) for s in capacity),
            exchange=f(exchange),
            source=src,
            initial=tuple(f(s) for s in initial),
            horizon=float(horizon),
        )


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    worst_value: float
    location: tuple | None = None
    note: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple
    unchecked: tuple = field(
        default=("regularity of cell correctors (assumed, not verified)",)
    )

    @property
    def ok(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {
            "ok": self.ok,
            "checks": [
                {
                    "name": c.name,
                    "passed": c.passed,
                    "worst_value": c.worst_value,
                    "location": c.location,
                    "note": c.note,
                }
                for c in self.checks
            ],
            "unchecked": list(self.unchecked),
        }


def _macro_samples(f, domain, n):
    return domain.lattice(n) if f.depends_on_x else np.asarray([domain.lower])


def validate(data: ProblemData, tol_mean=None, resolution=32, lower_bound=1e-12):
    """Check coercivity of kappa/capacity and zero cell mean of the exchange field.

    Failures are reported, never raised.
    """
    if resolution < 8:
        raise ValueError("sample resolution must be at least 8 per dimension")
    d = data.dim
    checks = []
    ypts, _ = gauss_cell_points(d, resolution)
    names = ("kappa1", "kappa2", "capacity1", "capacity2")
    for name, f in zip(names, (*data.kappa, *data.capacity)):
        xs = _macro_samples(f, data.domain, resolution)
        worst, where = np.inf, None
        for x in xs:
            vals = f.evaluate(x[None, :], ypts) if f.depends_on_y else f.evaluate(x[None, :])
            i = int(np.argmin(vals))
            if vals.flat[i] < worst:
                worst = float(vals.flat[i])
                where = (tuple(x), tuple(ypts[i]) if f.depends_on_y else None)
        checks.append(
            Check(f"coercivity:{name}", worst >= lower_bound, worst, where, f"min >= {lower_bound:g}")
        )
    q = data.exchange
    if tol_mean is None:
        tol_mean = DEFAULT_TOL_MEAN_SAMPLED if isinstance(q, SampledField) else DEFAULT_TOL_MEAN_EXPR
    worst, where = 0.0, None
    for x in _macro_samples(q, data.domain, resolution):
        m = q.cell_mean(x, resolution)
        if abs(m) >= abs(worst):
            worst, where = m, (tuple(x), None)
    checks.append(
        Check("zero-mean:exchange", abs(worst) <= tol_mean, worst, where, f"|mean| <= {tol_mean:g}")
    )
    return ValidationReport(tuple(checks))


# -- grid files -------------------------------------------------------------


def write_grid_file(path, field: SampledField):
    """Write a sampled field as CSV (``.csv``) or flat binary (anything else).

    Header: dimension, the x resolution per axis, the y resolution per axis
    (all zeros when the field does not depend on y) and the box bounds.
    """
    path = Path(path)
    d = field.dim
    xs = field.values.shape[:d]
    ys = field.values.shape[d:] if field.has_y else (0,) * d
    if path.suffix == ".csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["d", d, "x_res", *xs, "y_res", *ys])
            w.writerow(["lower", *field.domain.lower, "upper", *field.domain.upper])
            for v in field.values.ravel():
                w.writerow([repr(float(v))])
    else:
        header = np.array([d, *xs, *ys], dtype="<i8")
        bounds = np.array([*field.domain.lower, *field.domain.upper], dtype="<f8")
        with open(path, "wb") as fh:
            fh.write(header.tobytes())
            fh.write(bounds.tobytes())
            fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_grid_file(path) -> SampledField:
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        head = rows[0]
        d = int(head[1])
        xs = tuple(int(v) for v in head[3 : 3 + d])
        ys = tuple(int(v) for v in head[4 + d : 4 + 2 * d])
        b = rows[1]
        lower = tuple(float(v) for v in b[1 : 1 + d])
        upper = tuple(float(v) for v in b[2 + d : 2 + 2 * d])
        vals = np.array([float(r[0]) for r in rows[2:] if r])
    else:
        raw = path.read_bytes()
        d = int(np.frombuffer(raw[:8], dtype="<i8")[0])
        dims = np.frombuffer(raw[8 : 8 + 16 * d], dtype="<i8")
        xs, ys = tuple(int(v) for v in dims[:d]), tuple(int(v) for v in dims[d:])
        off = 8 + 16 * d
        bounds = np.frombuffer(raw[off : off + 16 * d], dtype="<f8")
        lower, upper = tuple(bounds[:d]), tuple(bounds[d:])
        vals = np.frombuffer(raw[off + 16 * d :], dtype="<f8").copy()
    has_y = any(ys)
    shape = xs + (ys if has_y else ())
    if vals.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {int(np.prod(shape))} values, found {vals.size}")
    return SampledField(vals.reshape(shape), Box(lower, upper), has_y)


# -- problem files ----------------------------------------------------------

_COEFFICIENT_KEYS = (
    "kappa1",
    "kappa2",
    "capacity1",
    "capacity2",
    "exchange",
    "source",
    "initial1",
    "initial2",
)


def _field_from_entry(entry, dim, base: Path):
    if isinstance(entry, dict):
        if "grid" not in entry:
            raise ValueError(f"coefficient table needs a 'grid' key, got {sorted(entry)}")
        return read_grid_file(base / entry["grid"])
    return ExpressionField.parse(entry, dim)


def load_problem(path) -> tuple[ProblemData, dict]:
    """Read a YAML problem file; returns the data and the optional ``run`` table.

    Example::

        dimension: 1
        horizon: 0.1
        domain: {lower: [0.0], upper: [1.0]}
        coefficients:
          kappa1: "1 + 0.5*sin(2*pi*y1)"
          kappa2: {grid: kappa2.csv}
          ...
        run: {eps: [0.125, 0.0625, 0.03125], rho: 16}
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    dim = int(doc.get("dimension", 1))
    if dim not in (1, 2):
        raise ValueError("only dimensions 1 and 2 are supported")
    dom = doc.get("domain", {})
    domain = Box(tuple(dom.get("lower", [0.0] * dim)), tuple(dom.get("upper", [1.0] * dim)))
    if domain.dim != dim:
        raise ValueError("domain bounds do not match the dimension")
    coeffs = doc.get("coefficients", {})
    unknown = set(coeffs) - set(_COEFFICIENT_KEYS) - {"source1", "source2"}
    if unknown:
        raise ValueError(f"unknown coefficient keys: {sorted(unknown)}")
    defaults = {"capacity1": "1", "capacity2": "1", "exchange": "0", "source": "0",
                "initial1": "0", "initial2": "0"}
    get = lambda k: _field_from_entry(coeffs.get(k, defaults.get(k)), dim, path.parent)
    if "kappa1" not in coeffs or "kappa2" not in coeffs:
        raise ValueError("problem file must define kappa1 and kappa2")
    if "source1" in coeffs or "source2" in coeffs:
        source = (get("source1") if "source1" in coeffs else get("source"),
                  get("source2") if "source2" in coeffs else get("source"))
    else:
        source = get("source")
    data = ProblemData(
        domain=domain,
        kappa=(get("kappa1"), get("kappa2")),
        capacity=(get("capacity1"), get("capacity2")),
        exchange=get("exchange"),
        source=source,
        initial=(get("initial1"), get("initial2")),
        horizon=float(doc.get("horizon", 1.0)),
    )
    return data, dict(doc.get("run", {}) or {})


def as_callable(f: object, *, spatial_only=False):
    """Adapt a field or a plain callable to ``f(t, x)`` (or ``f(x)``)."""
    if hasattr(f, "evaluate"):
        if spatial_only:
            return lambda x: f.evaluate(x, None, 0.0)
        return lambda t, x: f.evaluate(x, None, t)
    return f


def random_trig_field(rng, dim, modes=3, amplitude=1.0, offset=0.0, max_wavenumber=2) -> str:
    """Random trigonometric polynomial in ``y`` as expression text.

    With ``offset`` 0 the cell mean is exactly zero.
    """
    terms = [repr(float(offset))]
    for _ in range(modes):
        k = rng.integers(-max_wavenumber, max_wavenumber + 1, size=dim)
        while not np.any(k):
            k = rng.integers(-max_wavenumber, max_wavenumber + 1, size=dim)
        c = float(rng.uniform(-amplitude, amplitude))
        fn = "sin" if rng.random() < 0.5 else "cos"
        phase = "+".join(f"({int(kk)})*y{j + 1}" for j, kk in enumerate(k))
        terms.append(f"({c!r})*{fn}(2*pi*({phase}))")
    return " + ".join(terms)
