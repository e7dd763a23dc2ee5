"""Homogenized dual-continuum parabolic solver and shared time stepping.

Space: Q1 Galerkin on a uniform box mesh with homogeneous Dirichlet data.
Time: implicit Euler or Crank-Nicolson, one monolithic block solve per step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .coeffs import Box
from .effective import EffectiveField
from .fem import StructuredGrid
from .linalg import SolverError

__all__ = [
    "MacroMesh",
    "TimeGrid",
    "TransientField",
    "AssemblyError",
    "PecletError",
    "SCHEMES",
    "march",
    "march_single",
    "homogenized_operators",
    "solve_homogenized",
    "initial_vector",
    "ManufacturedCase",
    "manufactured_case",
    "l2_error",
]

SCHEMES = ("implicit-euler", "crank-nicolson")
_SCHEME_ALIASES = {"ie": "implicit-euler", "cn": "crank-nicolson"}


class AssemblyError(RuntimeError):
    pass


class PecletError(ValueError):
    pass


def MacroMesh(box: Box, n):
    """Dirichlet Q1 mesh with ``n`` elements per axis (or a per-axis tuple)."""
    return StructuredGrid(box, n, periodic=False)


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if self.steps < 1 or self.horizon <= 0:
            raise ValueError("time grid needs T > 0 and at least one step")

    @classmethod
    def from_dt(cls, horizon, dt):
        return cls(horizon, max(1, int(round(horizon / dt))))

    @property
    def dt(self):
        return self.horizon / self.steps

    @property
    def times(self):
        return np.linspace(0.0, self.horizon, self.steps + 1)


@dataclass(frozen=True, eq=False)
class TransientField:
    """Nodal time series: ``u[k, n]`` is continuum ``k`` at step ``n`` (all mesh nodes)."""

    mesh: StructuredGrid
    tgrid: TimeGrid
    u: np.ndarray  # (2, steps + 1, n_nodes)
    scheme: str = "implicit-euler"
    metadata: dict = field(default_factory=dict)

    @property
    def u1(self):
        return self.u[0]

    @property
    def u2(self):
        return self.u[1]

    def to_csv(self, path, steps=None):
        """Snapshot table: node coordinates, step, time, u1, u2."""
        steps = [self.tgrid.steps] if steps is None else list(steps)
        d = self.mesh.dim
        times = self.tgrid.times
        with open(path, "w") as fh:
            fh.write(",".join([f"x{k + 1}" for k in range(d)] + ["step", "t", "u1", "u2"]) + "\n")
            for s in steps:
                for j, x in enumerate(self.mesh.nodes):
                    row = [repr(float(c)) for c in x] + [str(s), repr(float(times[s])),
                           repr(float(self.u[0, s, j])), repr(float(self.u[1, s, j]))]
                    fh.write(",".join(row) + "\n")

    def to_binary(self, path):
        """Header ``int64[d, *node_shape, steps + 1]`` and ``float64 [T]``, then ``u`` row-major."""
        d = self.mesh.dim
        head = np.array([d, *self.mesh.node_shape, self.tgrid.steps + 1], dtype="<i8")
        with open(path, "wb") as fh:
            fh.write(head.tobytes())
            fh.write(np.array([self.tgrid.horizon], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.u, dtype="<f8").tobytes())

    @staticmethod
    def read_binary(path):
        raw = Path(path).read_bytes()
        d = int(np.frombuffer(raw[:8], "<i8")[0])
        head = np.frombuffer(raw[8 : 8 * (d + 2)], "<i8")
        node_shape, nt = tuple(int(v) for v in head[:d]), int(head[d])
        off = 8 * (d + 2)
        T = float(np.frombuffer(raw[off : off + 8], "<f8")[0])
        u = np.frombuffer(raw[off + 8 :], "<f8").reshape(2, nt, int(np.prod(node_shape))).copy()
        return node_shape, T, u

    def write_metadata(self, path, **extra):
        meta = {
            "dimension": self.mesh.dim,
            "lower": list(self.mesh.box.lower),
            "upper": list(self.mesh.box.upper),
            "elements": list(self.mesh.shape),
            "horizon": self.tgrid.horizon,
            "steps": self.tgrid.steps,
            "scheme": self.scheme,
            **self.metadata,
            **extra,
        }
        Path(path).write_text(json.dumps(meta, indent=1, sort_keys=True))
        return meta


def _scheme(name):
    name = _SCHEME_ALIASES.get(name, name)
    if name not in SCHEMES:
        raise ValueError(f"unknown time scheme {name!r}")
    return name


def initial_vector(mesh: StructuredGrid, g, projection="interpolate"):
    """Discrete initial data with zero boundary values."""
    if g is None:
        return np.zeros(mesh.n_nodes)
    if hasattr(g, "evaluate"):
        fn = lambda x: g.evaluate(x, None, 0.0)
    else:
        fn = g
    u = np.zeros(mesh.n_nodes)
    I = mesh.interior
    if projection == "interpolate":
        u[I] = np.asarray(fn(mesh.nodes[I]), dtype=float)
    elif projection == "l2":
        M = mesh.mass()[I][:, I].tocsc()
        u[I] = splu(M).solve(mesh.load(np.asarray(fn(mesh.quad_points), dtype=float))[I])
    else:
        raise ValueError(f"unknown initial projection {projection!r}")
    return u


def _load_fn(mesh, q):
    """``t -> int q(t, .) phi_i`` for a field, a callable ``q(t, x)`` or None."""
    if q is None:
        return lambda t: np.zeros(mesh.n_nodes)
    xq = mesh.quad_points
    if hasattr(q, "evaluate"):
        if not q.depends_on_t:
            b = mesh.load(q.evaluate(xq, None, 0.0))
            return lambda t: b
        return lambda t: mesh.load(q.evaluate(xq, None, t))
    return lambda t: mesh.load(np.broadcast_to(np.asarray(q(t, xq), dtype=float), mesh.quad_weights.shape))


def _stepper(mass, A, dt, scheme):
    if scheme == "implicit-euler":
        lhs = (mass / dt + A).tocsc()
        rhs_mat = (mass / dt).tocsr()
    else:
        lhs = (mass / dt + 0.5 * A).tocsc()
        rhs_mat = (mass / dt - 0.5 * A).tocsr()
    try:
        lu = splu(lhs)
    except RuntimeError as exc:
        raise SolverError(f"step matrix factorisation failed: {exc}") from None
    return lhs, rhs_mat, lu


def _run(lhs, rhs_mat, lu, loads, u0, tgrid, scheme, tol_lin):
    m = tgrid.steps
    out = np.empty((m + 1, len(u0)))
    out[0] = u0
    times = tgrid.times
    f_prev = loads(times[0]) if scheme == "crank-nicolson" else None
    for n in range(1, m + 1):
        f_new = loads(times[n])
        rhs = rhs_mat @ out[n - 1] + (f_new if scheme == "implicit-euler" else 0.5 * (f_prev + f_new))
        u = lu.solve(rhs)
        res = np.linalg.norm(lhs @ u - rhs)
        scale = max(np.linalg.norm(rhs), np.finfo(float).tiny)
        if not np.all(np.isfinite(u)) or res > tol_lin * scale:
            raise SolverError(f"step {n}: weak residual {res:.3e} exceeds {tol_lin:g} x {scale:.3e}")
        out[n] = u
        f_prev = f_new
    return out


def march_single(mesh, mass, A, load, u0, tgrid, scheme="implicit-euler", tol_lin=1e-10):
    """Single-field Galerkin time stepping on the interior nodes of ``mesh``."""
    scheme = _scheme(scheme)
    I = mesh.interior
    Mi, Ai = mass[I][:, I], A[I][:, I]
    lhs, rhs_mat, lu = _stepper(Mi, Ai, tgrid.dt, scheme)
    loads = lambda t: load(t)[I]
    ui = _run(lhs, rhs_mat, lu, loads, u0[I], tgrid, scheme, tol_lin)
    out = np.zeros((tgrid.steps + 1, mesh.n_nodes))
    out[:, I] = ui
    return out


def march(mesh, masses, blocks, loads, u0, tgrid, scheme="implicit-euler", tol_lin=1e-10):
    """Two-field stepping with block operator ``[[A11, A12], [A21, A22]]``.

    When both coupling blocks vanish the fields are advanced separately by
    :func:`march_single`.
    """
    scheme = _scheme(scheme)
    (A11, A12), (A21, A22) = blocks
    I = mesh.interior
    off = [sp.csr_matrix(B[I][:, I]) for B in (A12, A21)]
    for B in off:
        B.eliminate_zeros()
    if all(B.nnz == 0 for B in off):
        return np.stack([
            march_single(mesh, masses[k], blocks[k][k], loads[k], u0[k], tgrid, scheme, tol_lin)
            for k in range(2)
        ])
    mass = sp.block_diag([masses[0][I][:, I], masses[1][I][:, I]], format="csr")
    A = sp.bmat([[A11[I][:, I], A12[I][:, I]], [A21[I][:, I], A22[I][:, I]]], format="csr")
    lhs, rhs_mat, lu = _stepper(mass, A, tgrid.dt, scheme)
    both = lambda t: np.concatenate([loads[0](t)[I], loads[1](t)[I]])
    ui = _run(lhs, rhs_mat, lu, both, np.concatenate([u0[0][I], u0[1][I]]), tgrid, scheme, tol_lin)
    out = np.zeros((2, tgrid.steps + 1, mesh.n_nodes))
    ni = len(I)
    out[0][:, I] = ui[:, :ni]
    out[1][:, I] = ui[:, ni:]
    return out


def _check_spd(mass, K, dt, label):
    S = (mass / dt + K).tocsr()
    asym = abs(S - S.T).max() if S.nnz else 0.0
    if asym > 1e-12 * max(abs(S).max(), 1e-300) or np.any(S.diagonal() <= 0):
        raise AssemblyError(f"{label}: diffusion block is not symmetric positive definite")


def homogenized_operators(eff: EffectiveField, mesh: StructuredGrid, max_peclet=2.0):
    """Mass matrices and the 2x2 block operator of the homogenized weak form."""
    c = eff.at(mesh.quad_points)
    ks, b, a, beta, cap = c["kappa_star"], c["convection"], c["drift"], c["beta"], c["capacity_bar"]
    hmax = float(np.max(mesh.h))
    for k in range(2):
        sym = 0.5 * (ks[..., k, :, :] + np.swapaxes(ks[..., k, :, :], -1, -2))
        lam = np.linalg.eigvalsh(sym)[..., 0]
        if np.any(lam <= 0):
            raise AssemblyError(f"kappa*_{k + 1} is not positive definite on the mesh")
        speed = np.linalg.norm(b[..., k, :], axis=-1) + np.linalg.norm(a[..., k, :], axis=-1)
        pe = float(np.max(speed * hmax / (2.0 * lam)))
        if pe > max_peclet:
            raise PecletError(f"element Peclet number {pe:.3g} > {max_peclet} for continuum {k + 1}; refine the mesh")
    K = [mesh.stiffness(ks[..., k, :, :]) for k in range(2)]
    Cb = [mesh.advection_test(b[..., k, :]) for k in range(2)]
    Da = [mesh.advection_trial(a[..., k, :]) for k in range(2)]
    R = mesh.mass(beta)
    masses = [mesh.mass(cap[..., k]) for k in range(2)]
    blocks = (
        (K[0] - Cb[0] + Da[0] - R, Cb[0] - Da[1] + R),
        (Cb[1] - Da[0] + R, K[1] - Cb[1] + Da[1] - R),
    )
    return masses, blocks, K


def solve_homogenized(
    eff: EffectiveField,
    source,
    initial,
    mesh: StructuredGrid,
    tgrid: TimeGrid,
    scheme="implicit-euler",
    tol_lin=1e-10,
    projection="interpolate",
    max_peclet=2.0,
):
    """Solve the homogenized system; ``source`` is one field for both continua or a pair."""
    scheme = _scheme(scheme)
    masses, blocks, K = homogenized_operators(eff, mesh, max_peclet)
    I = mesh.interior
    for k in range(2):
        _check_spd(masses[k][I][:, I], K[k][I][:, I], tgrid.dt, f"continuum {k + 1}")
    sources = tuple(source) if isinstance(source, (tuple, list)) else (source, source)
    loads = [_load_fn(mesh, q) for q in sources]
    u0 = [initial_vector(mesh, g, projection) for g in initial]
    u = march(mesh, masses, blocks, loads, u0, tgrid, scheme, tol_lin)
    return TransientField(mesh, tgrid, u, scheme, {"solver": "homogenized"})


@dataclass(frozen=True)
class ManufacturedCase:
    """Smooth exact solution of the homogenized system with matching sources.

    ``u_1 = exp(-t) s_1(x)`` and ``u_2 = cos(t) s_2(x)`` with sine bubbles
    ``s_1 = prod sin(pi z_i)``, ``s_2 = prod sin(2 pi z_i)``, ``z = (x - lower) / L``.
    Needs x-independent effective coefficients.
    """

    point: object
    box: Box

    def _bubble(self, k, x):
        x = np.asarray(x, dtype=float)
        lo = np.asarray(self.box.lower)
        L = np.asarray(self.box.lengths)
        w = (k + 1) * np.pi / L
        arg = w * (x - lo)
        s, c = np.sin(arg), np.cos(arg)
        val = np.prod(s, axis=-1)
        d = x.shape[-1]
        grad = np.empty(x.shape)
        hess = np.empty(x.shape + (d,))
        for i in range(d):
            others = np.prod(np.delete(s, i, axis=-1), axis=-1)
            grad[..., i] = w[i] * c[..., i] * others
            for j in range(d):
                if i == j:
                    hess[..., i, j] = -w[i] ** 2 * val
                else:
                    rest = np.prod(np.delete(s, [i, j], axis=-1), axis=-1)
                    hess[..., i, j] = w[i] * w[j] * c[..., i] * c[..., j] * rest
        return val, grad, hess

    @staticmethod
    def _time(k, t):
        return (np.exp(-t), -np.exp(-t)) if k == 0 else (np.cos(t), -np.sin(t))

    def exact(self, k, t, x):
        return self._time(k, t)[0] * self._bubble(k, x)[0]

    def source(self, k):
        p = self.point
        ks = np.asarray(p.kappa_star)
        b = np.asarray(p.convection)
        a = np.asarray(p.drift)
        cap = np.asarray(p.capacity_bar)
        j = 1 - k

        def q(t, x):
            parts = []
            for m in range(2):
                f, df = self._time(m, t)
                v, g, H = self._bubble(m, x)
                parts.append((f * v, df * v, f * g, f * H))
            u, ut, gu, Hu = parts[k]
            w, _, gw, _ = parts[j]
            div = np.einsum("ij,...ij->...", ks[k], Hu)
            return (cap[k] * ut - div - (gw - gu) @ b[k] + gu @ a[k] - gw @ a[j] - p.beta * (u - w))

        return q

    def sources(self):
        return (self.source(0), self.source(1))

    def initial(self):
        return tuple((lambda x, k=k: self.exact(k, 0.0, x)) for k in range(2))


def manufactured_case(eff: EffectiveField, box: Box):
    if len(eff.data) != 1:
        raise ValueError("manufactured solutions need x-independent effective coefficients")
    return ManufacturedCase(eff.data[0], box)


def l2_error(field: TransientField, exact, step=-1):
    """``max_k ||u_k - exact(k, t, .)||_{L2}`` at one time level, by Gauss quadrature."""
    mesh = field.mesh
    t = field.tgrid.times[step]
    errs = []
    for k in range(2):
        uh = mesh.values_at_quad(field.u[k, step])
        errs.append(np.sqrt(mesh.integrate((uh - exact(k, t, mesh.quad_points)) ** 2)))
    return float(max(errs))
