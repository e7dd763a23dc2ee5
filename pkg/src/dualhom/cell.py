"""Periodic unit-cell problems for the correctors N^i_k, M_k and the vector potential of Q."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coeffs import Box, ProblemData
from .fem import StructuredGrid
from .linalg import SolverError, pcg

__all__ = [
    "UnitCellGrid",
    "CellField",
    "CellSolutionSet",
    "VectorPotential",
    "CoercivityError",
    "SolvabilityError",
    "SolverError",
    "freeze",
    "sample",
    "assemble_periodic_operator",
    "solve_corrector_N",
    "solve_exchange_M",
    "compute_vector_potential",
    "solve_cell_problems",
    "write_cell_binary",
    "read_cell_binary",
]

TOL_LIN = 1e-10


class CoercivityError(ValueError):
    pass


class SolvabilityError(ValueError):
    pass


class UnitCellGrid(StructuredGrid):
    """Uniform periodic Q1 grid on the unit cell with ``n`` elements per axis."""

    def __init__(self, dim, n):
        if n < 4 or n % 2:
            raise ValueError(f"cell grid needs an even n >= 4, got {n}")
        if dim not in (1, 2):
            raise ValueError("cell grids exist for d = 1 and d = 2 only")
        super().__init__(Box((0.0,) * dim, (1.0,) * dim), n, periodic=True)
        self.n = n

    def __repr__(self):
        return f"UnitCellGrid(dim={self.dim}, n={self.n})"

    def neighbors(self, node):
        """The 2d periodic axis neighbours of a node."""
        idx = np.array(np.unravel_index(node, self.node_shape))
        out = []
        for k in range(self.dim):
            for s in (-1, 1):
                j = idx.copy()
                j[k] = (j[k] + s) % self.n
                out.append(int(np.ravel_multi_index(tuple(j), self.node_shape)))
        return out


@dataclass(frozen=True, eq=False)
class CellField:
    grid: UnitCellGrid
    values: np.ndarray

    def mean(self):
        return float(np.dot(self.grid.nodal_weights, self.values))

    def __call__(self, y):
        return self.grid.interpolate(self.values, y)

    def gradient(self, y):
        return self.grid.interpolate_gradient(self.values, y)

    def at_quad(self):
        return self.grid.values_at_quad(self.values)

    def gradient_at_quad(self):
        return self.grid.gradients_at_quad(self.values)


def freeze(f, x):
    """Restrict a two-scale field to the cell at macro point ``x``: ``y -> f(x, y)``."""
    x = np.asarray(x, dtype=float)
    if hasattr(f, "evaluate"):
        return lambda y: f.evaluate(x, y)
    return lambda y: f(x, y)


def sample(coef, grid, sampling="nodal"):
    """Values of a cell coefficient at the quadrature points.

    ``sampling="nodal"`` represents the coefficient by its Q1 interpolant
    (a :class:`CellField`); ``"quadrature"`` evaluates it at the Gauss points.
    """
    if isinstance(coef, CellField):
        return coef.at_quad()
    if callable(coef):
        if sampling == "nodal":
            return grid.values_at_quad(np.asarray(coef(grid.nodes), dtype=float))
        if sampling == "quadrature":
            return np.asarray(coef(grid.quad_points), dtype=float)
        raise ValueError(f"unknown sampling mode {sampling!r}")
    return np.broadcast_to(np.asarray(coef, dtype=float), grid.quad_weights.shape)



def assemble_periodic_operator(kappa, grid: UnitCellGrid, lower_bound=0.0, sampling="nodal"):
    """Periodic stiffness matrix ``int kappa grad phi_j . grad phi_i`` (kernel = constants)."""
    kq = sample(kappa, grid, sampling)
    if np.min(kq) <= lower_bound:
        e, q = np.unravel_index(np.argmin(kq), kq.shape)
        raise CoercivityError(
            f"kappa = {kq[e, q]:.6g} <= {lower_bound:g} at y = {tuple(grid.quad_points[e, q])}"
        )
    return grid.stiffness(kq)


def _solve(A, b, scale, grid, tol):
    x, info = pcg(A, b, tol=tol, atol=1e-14 * scale, weights=grid.nodal_weights)
    x = x - np.dot(grid.nodal_weights, x)
    return x, info


def _corrector(A, kq, axis, grid, tol):
    e = np.zeros(grid.dim)
    e[axis] = 1.0
    vec = kq[..., None] * e
    b = -grid.load_gradient(vec)
    # magnitude of the load without cancellation; constant kappa gives b ~ 0 exactly
    scale = np.linalg.norm(grid._scatter(np.einsum("eq,qi->ei", np.abs(kq) * grid.quad_weights, np.abs(grid.dphi[..., axis]))))
    return _solve(A, b, scale, grid, tol)


def solve_corrector_N(kappa, axis, grid: UnitCellGrid, tol=TOL_LIN, operator=None, sampling="nodal"):
    """Zero-mean solution of ``div(kappa (e_axis + grad N)) = 0`` (``axis`` is 0-based)."""
    if not 0 <= axis < grid.dim:
        raise ValueError(f"direction index {axis} out of range for d = {grid.dim}")
    kq = sample(kappa, grid, sampling)
    A = assemble_periodic_operator(kq, grid) if operator is None else operator
    x, _ = _corrector(A, kq, axis, grid, tol)
    return CellField(grid, x)


def _check_mean(qq, grid, tol_mean):
    mean = grid.integrate(qq)
    if abs(mean) > tol_mean:
        raise SolvabilityError(f"exchange field has cell mean {mean:.3e} (tolerance {tol_mean:g})")


def solve_exchange_M(kappa, Q, grid: UnitCellGrid, tol=TOL_LIN, tol_mean=1e-10, operator=None, sampling="nodal"):
    """Zero-mean solution of ``div(kappa grad M) + Q = 0``."""
    kq = sample(kappa, grid, sampling)
    qq = sample(Q, grid, sampling)
    _check_mean(qq, grid, tol_mean)
    A = assemble_periodic_operator(kq, grid) if operator is None else operator
    b = grid.load(qq)
    x, _ = _solve(A, b, np.linalg.norm(grid.load(np.abs(qq))), grid, tol)
    return CellField(grid, x)


@dataclass(frozen=True, eq=False)
class VectorPotential:
    """``components[k]`` is the nodal (gradient-recovered) k-th component of ``grad chi``."""

    chi: CellField
    components: tuple

    def weak_divergence_residual(self, Q, sampling="nodal"):
        """Relative residual of ``-int grad chi . grad phi = int Q phi`` over all basis functions."""
        g = self.chi.grid
        lhs = -g.load_gradient(self.chi.gradient_at_quad())
        rhs = g.load(sample(Q, g, sampling))
        return np.linalg.norm(lhs - rhs) / max(np.linalg.norm(rhs), 1e-300)

    def divergence_at_quad(self):
        g = self.chi.grid
        return sum(g.gradients_at_quad(c.values)[..., k] for k, c in enumerate(self.components))


def compute_vector_potential(Q, grid: UnitCellGrid, tol=TOL_LIN, tol_mean=1e-10, sampling="nodal"):
    """Periodic vector field ``grad chi`` with ``laplace chi = Q`` and zero-mean ``chi``."""
    qq = sample(Q, grid, sampling)
    _check_mean(qq, grid, tol_mean)
    A = grid.stiffness(1.0)
    b = -grid.load(qq)
    x, _ = _solve(A, b, np.linalg.norm(grid.load(np.abs(qq))), grid, tol)
    grad = grid.recovered_gradient(x)
    return VectorPotential(CellField(grid, x), tuple(CellField(grid, grad[:, k].copy()) for k in range(grid.dim)))


@dataclass(frozen=True, eq=False)
class CellSolutionSet:
    """Correctors at one macro point.  ``N[k][i]`` and ``M[k]`` for continuum ``k`` (0-based)."""

    grid: UnitCellGrid
    N: tuple
    M: tuple
    macro_point: tuple
    iterations: dict = field(default_factory=dict)

    def fields(self):
        out = {}
        for k in range(2):
            for i, f in enumerate(self.N[k]):
                out[f"N{i + 1}_{k + 1}"] = f
        for k in range(2):
            out[f"M_{k + 1}"] = self.M[k]
        return out

    def to_csv(self, path):
        fields = self.fields()
        g = self.grid
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"y{k + 1}" for k in range(g.dim)] + list(fields))
            for j in range(g.n_nodes):
                w.writerow([repr(float(c)) for c in g.nodes[j]] + [repr(float(f.values[j])) for f in fields.values()])

    def to_binary(self, path):
        write_cell_binary(path, self.grid, [f.values for f in self.fields().values()])

    def to_arrays(self):
        return {name: f.values for name, f in self.fields().items()}

    @classmethod
    def from_arrays(cls, grid, arrays, macro_point):
        d = grid.dim
        N = tuple(tuple(CellField(grid, np.asarray(arrays[f"N{i + 1}_{k + 1}"])) for i in range(d)) for k in range(2))
        M = tuple(CellField(grid, np.asarray(arrays[f"M_{k + 1}"])) for k in range(2))
        return cls(grid, N, M, tuple(macro_point))


def solve_cell_problems(data: ProblemData, x, grid: UnitCellGrid, tol=TOL_LIN, tol_mean=1e-10, sampling="nodal"):
    """All corrector problems for both continua at macro point ``x``."""
    qq = sample(freeze(data.exchange, x), grid, sampling)
    _check_mean(qq, grid, tol_mean)
    N, M, its = [], [], {}
    for k in range(2):
        kq = sample(freeze(data.kappa[k], x), grid, sampling)
        A = assemble_periodic_operator(kq, grid)
        Nk = []
        for i in range(grid.dim):
            try:
                v, info = _corrector(A, kq, i, grid, tol)
            except SolverError as exc:
                raise SolverError(f"N{i + 1}_{k + 1} at x = {tuple(x)}: {exc}", exc.residuals) from None
            Nk.append(CellField(grid, v))
            its[f"N{i + 1}_{k + 1}"] = info.iterations
        try:
            v, info = _solve(A, grid.load(qq), np.linalg.norm(grid.load(np.abs(qq))), grid, tol)
        except SolverError as exc:
            raise SolverError(f"M_{k + 1} at x = {tuple(x)}: {exc}", exc.residuals) from None
        its[f"M_{k + 1}"] = info.iterations
        N.append(tuple(Nk))
        M.append(CellField(grid, v))
    return CellSolutionSet(grid, tuple(N), tuple(M), tuple(float(v) for v in np.ravel(x)), its)


def write_cell_binary(path, grid: UnitCellGrid, arrays):
    """Header ``int64[d, n, field_count]`` then ``float64`` payload, one field per row."""
    payload = np.ascontiguousarray(np.stack([np.asarray(a, dtype="<f8") for a in arrays]))
    with open(path, "wb") as fh:
        fh.write(np.array([grid.dim, grid.n, len(arrays)], dtype="<i8").tobytes())
        fh.write(payload.tobytes())


def read_cell_binary(path):
    raw = Path(path).read_bytes()
    d, n, count = (int(v) for v in np.frombuffer(raw[:24], dtype="<i8"))
    vals = np.frombuffer(raw[24:], dtype="<f8").reshape(count, n**d).copy()
    return UnitCellGrid(d, n), vals
