"""Fully resolved solver for the two-scale system at a given epsilon."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coeffs import ProblemData
from .fem import StructuredGrid
from .macrosolve import (
    MacroMesh,
    TimeGrid,
    TransientField,
    _load_fn,
    initial_vector,
    march,
    march_single,
)

__all__ = ["ResolutionError", "FineRunSpec", "fine_coefficients", "fine_operators", "solve_fine", "solve_single_field"]


class ResolutionError(ValueError):
    pass


@dataclass(frozen=True)
class FineRunSpec:
    """``n`` elements per axis; by default the coarsest mesh with ``h <= epsilon / rho``."""

    epsilon: float
    data: ProblemData
    tgrid: TimeGrid
    n: tuple | None = None
    rho: int = 16

    def __post_init__(self):
        eps = self.epsilon
        if not 0.0 < eps < 1.0:
            raise ResolutionError(f"epsilon must lie in (0, 1), got {eps}")
        if self.rho < 1:
            raise ResolutionError(f"rho must be a positive integer, got {self.rho}")
        L = self.data.domain.lengths
        if self.n is None:
            n = tuple(int(math.ceil(l * self.rho / eps - 1e-9)) for l in L)
        else:
            n = (int(self.n),) * self.data.dim if np.ndim(self.n) == 0 else tuple(int(v) for v in self.n)
        h = L / np.array(n)
        if np.any(h > (eps / self.rho) * (1 + 1e-12)):
            raise ResolutionError(f"mesh size {h.max():.4g} does not resolve epsilon/rho = {eps / self.rho:.4g}")
        object.__setattr__(self, "n", n)

    def mesh(self):
        return MacroMesh(self.data.domain, self.n)


def fine_coefficients(data: ProblemData, eps, mesh: StructuredGrid):
    """kappa_k, capacity_k and Q at the mesh quadrature points with ``y = frac(x / eps)``."""
    x = mesh.quad_points
    y = np.mod(x / eps, 1.0)
    kap = [f.evaluate(x, y) for f in data.kappa]
    cap = [f.evaluate(x, y) for f in data.capacity]
    q = data.exchange.evaluate(x, y)
    return kap, cap, q


def fine_operators(data: ProblemData, eps, mesh: StructuredGrid):
    """Masses, diffusion blocks and the exchange matrix ``B = (1/eps) int Q phi_j phi_i``."""
    kap, cap, q = fine_coefficients(data, eps, mesh)
    masses = [mesh.mass(c) for c in cap]
    K = [mesh.stiffness(k) for k in kap]
    B = mesh.mass(q / eps)
    blocks = ((K[0] + B, -B), (-B, K[1] + B))
    return masses, blocks, B


def solve_fine(spec: FineRunSpec, scheme="implicit-euler", tol_lin=1e-10, check=True):
    """Implicit Galerkin solution of the two-scale system; the exchange term is implicit."""
    data = spec.data
    if check:
        data.check()
    mesh = spec.mesh()
    masses, blocks, _ = fine_operators(data, spec.epsilon, mesh)
    loads = [_load_fn(mesh, q) for q in data.sources()]
    u0 = [initial_vector(mesh, g) for g in data.initial]
    u = march(mesh, masses, blocks, loads, u0, spec.tgrid, scheme, tol_lin)
    return TransientField(mesh, spec.tgrid, u, scheme, {"solver": "fine", "epsilon": spec.epsilon, "rho": spec.rho})


def solve_single_field(mesh, kappa_q, capacity_q, source, g, tgrid, scheme="implicit-euler", tol_lin=1e-10):
    """Reference single-continuum solver (coefficients given at the quadrature points)."""
    u0 = initial_vector(mesh, g)
    return march_single(mesh, mesh.mass(capacity_q), mesh.stiffness(kappa_q), _load_fn(mesh, source), u0, tgrid, scheme, tol_lin)
