"""Jacobi-preconditioned conjugate gradients with optional constant deflation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["SolverError", "CGInfo", "pcg"]


class SolverError(RuntimeError):
    """Linear solver failure; ``residuals`` holds the residual-norm history."""

    def __init__(self, message, residuals=()):
        super().__init__(message)
        self.residuals = list(residuals)


@dataclass
class CGInfo:
    iterations: int
    residual: float
    converged: bool
    residuals: list = field(default_factory=list)


def pcg(A, b, tol=1e-10, atol=0.0, maxiter=None, weights=None):
    """Solve ``A x = b`` for symmetric positive (semi)definite ``A``.

    If ``weights`` is given, ``A`` is assumed to have the constants as its
    kernel: ``b`` is projected onto the range and the iterates are kept in
    the subspace ``weights . x = 0``.  Stops when
    ``||r|| <= max(tol * ||b||, atol)``.
    """
    n = A.shape[0]
    maxiter = 10 * n if maxiter is None else maxiter
    b = np.asarray(b, dtype=float)
    if weights is not None:
        w = np.asarray(weights, dtype=float) / np.sum(weights)

        def project(v):
            # removes the component along the constant vector in the w-inner product
            return v - np.dot(w, v)

        def project_rhs(v):
            return v - np.sum(v) / n

        b = project_rhs(b)
    else:
        project = project_rhs = lambda v: v

    bnorm = np.linalg.norm(b)
    x = np.zeros(n)
    stop = max(tol * bnorm, atol)
    if bnorm <= atol or bnorm == 0.0:
        return x, CGInfo(0, bnorm, True, [bnorm])
    dinv = 1.0 / A.diagonal()
    r = b.copy()
    z = project(dinv * r)
    p = z.copy()
    rz = np.dot(r, z)
    history = [bnorm]
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / np.dot(p, Ap)
        x += alpha * p
        r -= alpha * Ap
        r = project_rhs(r)
        rnorm = np.linalg.norm(r)
        history.append(rnorm)
        if rnorm <= stop:
            return project(x), CGInfo(it, rnorm, True, history)
        z = project(dinv * r)
        rz_new = np.dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"CG did not converge in {maxiter} iterations (residual {history[-1]:.3e}, target {stop:.3e})",
        history,
    )
