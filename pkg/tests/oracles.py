"""Independent reference computations shared by the unit and acceptance tests."""

import numpy as np
import sympy as sp

from dualhom.coeffs import Box
from dualhom.effective import EffectiveField, EffectivePointData
from dualhom.macrosolve import MacroMesh, TimeGrid, solve_homogenized

t, x1, x2 = sp.symbols("t x1 x2")

# manufactured pair and constant effective coefficients of the macro solver example
MMS_U = (
    sp.exp(-t) * sp.sin(sp.pi * x1) * sp.sin(sp.pi * x2),
    sp.exp(-t) * x1 * (1 - x1) * x2 * (1 - x2),
)
MMS_COEFFS = dict(kappa_star=np.eye(2), convection=[0.1, 0.0], drift=[0.05, 0.0], beta=1.0, capacity_bar=(1.0, 1.0))


def strong_forcing(u, point):
    """Sources of the homogenized system for the exact pair ``u`` (sympy expressions).

    Row k: C_k u_k,t - div(K_k grad u_k) - b_k . grad(u_j - u_k) + a_k . grad u_k - a_j . grad u_j - beta (u_k - u_j).
    """
    X = (x1, x2)
    grad = lambda f: sp.Matrix([sp.diff(f, v) for v in X])
    K = [sp.Matrix(np.asarray(point.kappa_star[k]).tolist()) for k in range(2)]
    b = [sp.Matrix(np.asarray(point.convection[k]).tolist()) for k in range(2)]
    a = [sp.Matrix(np.asarray(point.drift[k]).tolist()) for k in range(2)]
    out = []
    for k in range(2):
        j = 1 - k
        flux = K[k] * grad(u[k])
        div = sum(sp.diff(flux[i], X[i]) for i in range(2))
        expr = (point.capacity_bar[k] * sp.diff(u[k], t) - div - (b[k].T * grad(u[j] - u[k]))[0]
                + (a[k].T * grad(u[k]))[0] - (a[j].T * grad(u[j]))[0] - point.beta * (u[k] - u[j]))
        out.append(sp.simplify(expr))
    return out


def lambdify_tx(expr):
    f = sp.lambdify((t, x1, x2), expr, "numpy")
    return lambda tt, X: np.broadcast_to(f(tt, X[..., 0], X[..., 1]), X.shape[:-1])


class MMSProblem:
    def __init__(self, u=MMS_U, **coeffs):
        self.point = EffectivePointData.constant(2, **(coeffs or MMS_COEFFS))
        self.box = Box((0.0, 0.0), (1.0, 1.0))
        self.eff = EffectiveField.constant(self.point, self.box)
        self.exact = [lambdify_tx(e) for e in u]
        self.sources = tuple(lambdify_tx(f) for f in strong_forcing(u, self.point))
        self.initial = tuple((lambda X, f=f: f(0.0, X)) for f in self.exact)

    def solve(self, n, steps, scheme, horizon=0.5):
        return solve_homogenized(self.eff, self.sources, self.initial, MacroMesh(self.box, n),
                                 TimeGrid(horizon, steps), scheme)

    def error(self, field, step=-1):
        mesh = field.mesh
        tt = field.tgrid.times[step]
        return max(
            np.sqrt(mesh.integrate((mesh.values_at_quad(field.u[k, step]) - self.exact[k](tt, mesh.quad_points)) ** 2))
            for k in range(2)
        )


def fitted_order(h, err):
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


def spatial_orders(problem, meshes=(8, 16, 32, 64), steps=200):
    errs = [problem.error(problem.solve(n, steps, "crank-nicolson")) for n in meshes]
    return fitted_order(1.0 / np.array(meshes), errs), errs


def temporal_order(problem, scheme, steps, n=16, ref_steps=4096):
    """Order in dt against a same-mesh Crank-Nicolson reference with a much finer step."""
    ref = problem.solve(n, ref_steps, "crank-nicolson")
    mesh = ref.mesh
    errs = []
    for m in steps:
        f = problem.solve(n, m, scheme)
        diff = mesh.values_at_quad(f.u[:, -1] - ref.u[:, -1])
        errs.append(float(np.max(np.sqrt(mesh.integrate(diff**2)))))
    return fitted_order(0.5 / np.array(steps), errs), errs
