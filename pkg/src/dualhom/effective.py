"""Coefficients of the homogenized dual-continuum system, assembled from cell solutions."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .cell import (
    CellSolutionSet,
    UnitCellGrid,
    freeze,
    sample,
    solve_cell_problems,
)
from .coeffs import ProblemData
from .linalg import SolverError

log = logging.getLogger(__name__)

__all__ = [
    "EffectivePointData",
    "EffectiveField",
    "assemble_kappa_star",
    "assemble_convection",
    "assemble_drift",
    "assemble_exchange",
    "exchange_energy",
    "effective_point",
    "build_effective_field",
    "CellCache",
]


def assemble_kappa_star(kappa, N, grid: UnitCellGrid, sampling="nodal"):
    """``K[i, j] = int kappa (delta_ij + dN^j/dy_i) dy``; ``N`` lists one corrector per direction."""
    kq = sample(kappa, grid, sampling)
    d = grid.dim
    out = np.empty((d, d))
    for j in range(d):
        g = N[j].gradient_at_quad()
        for i in range(d):
            out[i, j] = grid.integrate(kq * ((i == j) + g[..., i]))
    return out


def assemble_convection(kappa, M, grid: UnitCellGrid, sampling="nodal"):
    """``b = int kappa grad M dy``."""
    kq = sample(kappa, grid, sampling)
    g = M.gradient_at_quad()
    return np.array([grid.integrate(kq * g[..., i]) for i in range(grid.dim)])


def assemble_drift(Q, N, grid: UnitCellGrid, sampling="nodal"):
    """``a^i = int Q N^i dy``."""
    qq = sample(Q, grid, sampling)
    return np.array([grid.integrate(qq * Ni.at_quad()) for Ni in N])


def assemble_exchange(Q, M1, M2, grid: UnitCellGrid, sampling="nodal"):
    """``beta = int Q (M_1 + M_2) dy``; the homogenized interaction coefficient is ``-beta``."""
    qq = sample(Q, grid, sampling)
    return float(grid.integrate(qq * (M1.at_quad() + M2.at_quad())))


def exchange_energy(kappa, M, grid: UnitCellGrid, sampling="nodal"):
    """``int kappa |grad M|^2 dy``, which equals ``int Q M dy`` for the exact cell solution."""
    kq = sample(kappa, grid, sampling)
    g = M.gradient_at_quad()
    return float(grid.integrate(kq * np.sum(g * g, axis=-1)))


@dataclass(frozen=True, eq=False)
class EffectivePointData:
    """Homogenized coefficients at one macro point; index 0/1 is the continuum."""

    kappa_star: np.ndarray  # (2, d, d)
    convection: np.ndarray  # (2, d)
    drift: np.ndarray  # (2, d)
    beta: float
    capacity_bar: np.ndarray  # (2,)
    macro_point: tuple
    energy: np.ndarray = field(default=None)  # (2,), int kappa_k |grad M_k|^2
    bounds: np.ndarray = field(default=None)  # (2, 2): harmonic and arithmetic means of kappa_k

    @property
    def dim(self):
        return self.kappa_star.shape[-1]

    def symmetry_defect(self):
        k = self.kappa_star
        return float(np.max(np.abs(k - np.swapaxes(k, -1, -2))) / max(np.max(np.abs(k)), 1e-300))

    def checks(self, slack=1e-8):
        """Per-point invariants as ``{name: bool}``."""
        out = {"symmetric": self.symmetry_defect() <= 1e-10}
        eig = [np.linalg.eigvalsh(0.5 * (k + k.T)) for k in self.kappa_star]
        out["positive_definite"] = all(e[0] > 0 for e in eig)
        if self.bounds is not None:
            out["voigt_reuss"] = all(
                lo * (1 - slack) <= e[0] and e[-1] <= hi * (1 + slack)
                for e, (lo, hi) in zip(eig, self.bounds)
            )
        scale = max(1.0, abs(self.beta))
        out["beta_nonnegative"] = self.beta >= -1e-10 * scale
        if self.energy is not None:
            out["energy_identity"] = abs(self.beta - float(np.sum(self.energy))) <= 1e-8 * scale
        return out

    @classmethod
    def constant(cls, dim, kappa_star=None, convection=None, drift=None, beta=0.0, capacity_bar=(1.0, 1.0)):
        """Point data given directly (e.g. for manufactured solutions)."""
        def pair(v, shape, default):
            v = default if v is None else np.asarray(v, dtype=float)
            v = np.broadcast_to(v, shape).copy() if np.ndim(v) == len(shape) - 1 else np.asarray(v, float).reshape(shape)
            return v

        ks = pair(kappa_star, (2, dim, dim), np.eye(dim))
        return cls(
            kappa_star=ks,
            convection=pair(convection, (2, dim), np.zeros(dim)),
            drift=pair(drift, (2, dim), np.zeros(dim)),
            beta=float(beta),
            capacity_bar=np.broadcast_to(np.asarray(capacity_bar, dtype=float), (2,)).copy(),
            macro_point=(0.0,) * dim,
        )

    def to_dict(self):
        return {
            "macro_point": list(self.macro_point),
            "kappa_star": self.kappa_star.tolist(),
            "convection": self.convection.tolist(),
            "drift": self.drift.tolist(),
            "beta": self.beta,
            "capacity_bar": self.capacity_bar.tolist(),
            "energy": None if self.energy is None else self.energy.tolist(),
            "bounds": None if self.bounds is None else self.bounds.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        arr = lambda v: None if v is None else np.asarray(v, dtype=float)
        return cls(
            kappa_star=arr(d["kappa_star"]),
            convection=arr(d["convection"]),
            drift=arr(d["drift"]),
            beta=float(d["beta"]),
            capacity_bar=arr(d["capacity_bar"]),
            macro_point=tuple(d["macro_point"]),
            energy=arr(d.get("energy")),
            bounds=arr(d.get("bounds")),
        )


def _kappa_bounds(kq, grid):
    return np.array([1.0 / grid.integrate(1.0 / kq), grid.integrate(kq)])


def effective_point(data: ProblemData, x, grid: UnitCellGrid, cells: CellSolutionSet | None = None, sampling="nodal"):
    """Solve the cell problems at ``x`` (unless given) and assemble every coefficient group."""
    x = np.asarray(x, dtype=float)
    if cells is None:
        cells = solve_cell_problems(data, x, grid, sampling=sampling)
    Q = freeze(data.exchange, x)
    ks, b, a, en, bounds, cap = [], [], [], [], [], []
    for k in range(2):
        kap = sample(freeze(data.kappa[k], x), grid, sampling)
        ks.append(assemble_kappa_star(kap, cells.N[k], grid))
        b.append(assemble_convection(kap, cells.M[k], grid))
        a.append(assemble_drift(sample(Q, grid, sampling), cells.N[k], grid))
        en.append(exchange_energy(kap, cells.M[k], grid))
        bounds.append(_kappa_bounds(kap, grid))
        cap.append(grid.integrate(sample(freeze(data.capacity[k], x), grid, sampling)))
    beta = assemble_exchange(sample(Q, grid, sampling), cells.M[0], cells.M[1], grid)
    return EffectivePointData(
        kappa_star=np.array(ks),
        convection=np.array(b),
        drift=np.array(a),
        beta=beta,
        capacity_bar=np.array(cap),
        macro_point=tuple(float(v) for v in x),
        energy=np.array(en),
        bounds=np.array(bounds),
    ), cells


class CellCache:
    """On-disk cache of cell solutions keyed by (coefficient hash, macro point, grid n)."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, data, x, n, sampling):
        import hashlib

        key = data.fingerprint()
        pt = "any" if not data.depends_on_x else ",".join(repr(float(v)) for v in x)
        h = hashlib.sha256(f"{key}|{pt}|{n}|{data.dim}|{sampling}".encode()).hexdigest()[:24]
        return self.directory / f"cell_{h}.npz"

    def get(self, data, x, grid, sampling):
        p = self._path(data, x, grid.n, sampling)
        if not p.exists():
            return None
        with np.load(p) as z:
            return CellSolutionSet.from_arrays(grid, dict(z), x)

    def put(self, data, x, grid, sampling, cells):
        p = self._path(data, x, grid.n, sampling)
        tmp = p.with_suffix(".tmp.npz")
        np.savez(tmp, **cells.to_arrays())
        tmp.replace(p)


@dataclass(frozen=True, eq=False)
class EffectiveField:
    """Effective coefficients at macro sample points.

    ``mode="lattice"``: a tensor lattice of ``lattice_shape`` points over the
    domain, interpolated multilinearly.  ``mode="points"``: scattered points
    (e.g. macro quadrature points) that are looked up exactly.
    """

    points: np.ndarray  # (ns, d)
    data: tuple  # EffectivePointData per sample
    mode: str = "lattice"
    lattice_shape: tuple = ()
    lower: tuple = ()
    upper: tuple = ()
    cells: tuple | None = None

    @property
    def dim(self):
        return self.points.shape[1]

    def stacked(self):
        """Arrays of all coefficient groups with a leading sample axis."""
        return {
            "kappa_star": np.array([p.kappa_star for p in self.data]),
            "convection": np.array([p.convection for p in self.data]),
            "drift": np.array([p.drift for p in self.data]),
            "beta": np.array([p.beta for p in self.data]),
            "capacity_bar": np.array([p.capacity_bar for p in self.data]),
        }

    def sample_index(self, points):
        """Index of the sample coinciding with each point (``mode='points'``)."""
        from scipy.spatial import cKDTree

        dist, idx = cKDTree(self.points).query(np.asarray(points).reshape(-1, self.dim))
        if np.max(dist, initial=0.0) > 1e-9:
            raise ValueError("effective field was not built at the requested points")
        return idx.reshape(np.shape(points)[:-1])

    def at(self, points):
        """Coefficient arrays at ``points`` (shape ``(..., d)``)."""
        points = np.asarray(points, dtype=float)
        lead = points.shape[:-1]
        st = self.stacked()
        if len(self.data) == 1:
            return {k: np.broadcast_to(v[0], lead + v.shape[1:]).copy() for k, v in st.items()}
        if self.mode == "points":
            idx = self.sample_index(points)
            return {k: v[idx] for k, v in st.items()}
        axes = []
        for k, n in enumerate(self.lattice_shape):
            axes.append(np.linspace(self.lower[k], self.upper[k], n))
        flat = np.clip(points.reshape(-1, self.dim), self.lower, self.upper)
        out = {}
        keep = [k for k, n in enumerate(self.lattice_shape) if n > 1]
        for key, v in st.items():
            tail = v.shape[1:]
            vals = v.reshape(tuple(self.lattice_shape) + tail)
            vals = vals.reshape(tuple(self.lattice_shape[k] for k in keep) + tail)
            interp = RegularGridInterpolator(tuple(axes[k] for k in keep), vals)
            out[key] = interp(flat[:, keep]).reshape(lead + tail)
        return out

    def cell_weights(self, points):
        """Sample indices and multilinear weights for interpolating cell data at ``points``.

        Returns ``(idx, w)`` with shapes ``(npts, m)``.
        """
        points = np.asarray(points, dtype=float).reshape(-1, self.dim)
        if len(self.data) == 1:
            return np.zeros((len(points), 1), dtype=int), np.ones((len(points), 1))
        if self.mode == "points":
            return self.sample_index(points).reshape(-1, 1), np.ones((len(points), 1))
        shape = np.array(self.lattice_shape)
        h = np.where(shape > 1, (np.subtract(self.upper, self.lower)) / np.maximum(shape - 1, 1), 1.0)
        s = np.clip((points - self.lower) / h, 0, shape - 1)
        base = np.minimum(np.floor(s).astype(int), np.maximum(shape - 2, 0))
        t = np.where(shape > 1, s - base, 0.0)
        idx, w = [], []
        for corner in np.ndindex(*([2] * self.dim)):
            c = np.array(corner)
            node = np.minimum(base + c, shape - 1)
            idx.append(np.ravel_multi_index(tuple(node.T), tuple(shape)))
            w.append(np.prod(np.where(c == 1, t, 1 - t), axis=1))
        return np.stack(idx, axis=1), np.stack(w, axis=1)

    def all_checks(self):
        return [p.checks() for p in self.data]

    def to_json(self, path=None):
        doc = {
            "dimension": self.dim,
            "mode": self.mode,
            "lattice_shape": list(self.lattice_shape),
            "lower": list(self.lower),
            "upper": list(self.upper),
            "points": self.points.tolist(),
            "samples": [p.to_dict() for p in self.data],
        }
        text = json.dumps(doc, indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source):
        text = Path(source).read_text() if isinstance(source, (str, Path)) and Path(source).exists() else source
        doc = json.loads(text)
        return cls(
            points=np.asarray(doc["points"], dtype=float).reshape(-1, doc["dimension"]),
            data=tuple(EffectivePointData.from_dict(s) for s in doc["samples"]),
            mode=doc["mode"],
            lattice_shape=tuple(doc["lattice_shape"]),
            lower=tuple(doc["lower"]),
            upper=tuple(doc["upper"]),
        )

    @classmethod
    def constant(cls, point: EffectivePointData, domain=None):
        d = point.dim
        lower = domain.lower if domain is not None else (0.0,) * d
        upper = domain.upper if domain is not None else (1.0,) * d
        return cls(np.zeros((1, d)) + np.asarray(lower), (point,), "lattice", (1,) * d, tuple(lower), tuple(upper))


def _solve_at(args):
    data, x, n, sampling = args
    grid = UnitCellGrid(data.dim, n)
    try:
        point, cells = effective_point(data, x, grid, sampling=sampling)
    except SolverError as exc:
        raise SolverError(f"cell solve failed at macro point {tuple(x)}: {exc}", exc.residuals) from None
    return point, cells.to_arrays()


def build_effective_field(
    data: ProblemData,
    grid: UnitCellGrid,
    lattice=None,
    points=None,
    jobs=1,
    cache: CellCache | None = None,
    keep_cells=False,
    sampling="nodal",
    check=True,
):
    """Solve the cell problems at every macro sample and assemble the effective field.

    Pass ``lattice`` (points per axis, faces included) or ``points`` (an
    ``(ns, d)`` array such as the macro quadrature points).  Coefficients
    that do not depend on x are solved once and shared by all samples.
    """
    if check:
        data.check()
    dom = data.domain
    if points is not None:
        pts = np.asarray(points, dtype=float).reshape(-1, data.dim)
        mode, shape = "points", ()
    else:
        lattice = lattice if lattice is not None else 1
        shape = (int(lattice),) * data.dim if np.ndim(lattice) == 0 else tuple(int(v) for v in lattice)
        axes = [
            np.linspace(lo, hi, n) if n > 1 else np.array([lo])
            for lo, hi, n in zip(dom.lower, dom.upper, shape)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        mode = "lattice"

    unique = pts if data.depends_on_x else pts[:1]
    results = [None] * len(unique)
    todo = []
    for i, x in enumerate(unique):
        cached = cache.get(data, x, grid, sampling) if cache is not None else None
        if cached is not None:
            results[i] = (effective_point(data, x, grid, cells=cached, sampling=sampling)[0], cached.to_arrays())
        else:
            todo.append(i)
    args = [(data, unique[i], grid.n, sampling) for i in todo]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            solved = list(pool.map(_solve_at, args))
    else:
        solved = [_solve_at(a) for a in args]
    for i, res in zip(todo, solved):
        results[i] = res
        if cache is not None:
            cache.put(data, unique[i], grid, sampling, CellSolutionSet.from_arrays(grid, res[1], unique[i]))

    if data.depends_on_x:
        point_data = tuple(r[0] for r in results)
        cells = tuple(CellSolutionSet.from_arrays(grid, r[1], x) for r, x in zip(results, pts)) if keep_cells else None
    else:
        p0 = results[0][0]
        point_data = tuple(
            EffectivePointData(p0.kappa_star, p0.convection, p0.drift, p0.beta, p0.capacity_bar,
                               tuple(float(v) for v in x), p0.energy, p0.bounds)
            for x in pts
        )
        cells = (CellSolutionSet.from_arrays(grid, results[0][1], pts[0]),) * len(pts) if keep_cells else None
    for p in point_data:
        bad = [k for k, ok in p.checks().items() if not ok]
        if bad:
            log.warning("effective coefficients at %s violate %s", p.macro_point, bad)
    return EffectiveField(pts, point_data, mode, shape, dom.lower, dom.upper, cells)
