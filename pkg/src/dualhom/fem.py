"""Multilinear (Q1) finite elements on uniform tensor grids in 1 and 2 dimensions.

One class covers both periodic unit cells and Dirichlet boxes.  All
coefficient data enter as values at the element quadrature points, arrays of
shape ``(n_elements, n_quad)`` (scalars), ``(n_elements, n_quad, d)``
(vectors) or ``(n_elements, n_quad, d, d)`` (tensors).
"""

from __future__ import annotations

import itertools
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .coeffs import Box

__all__ = ["StructuredGrid", "gauss_legendre"]


def gauss_legendre(order):
    """Gauss-Legendre points and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


class StructuredGrid:
    """Uniform grid of ``shape`` elements over ``box``.

    With ``periodic=True`` opposite faces are identified (``prod(shape)``
    nodes); otherwise nodes include the boundary (``prod(shape+1)`` nodes)
    and :attr:`interior` lists the free ones.
    """

    def __init__(self, box: Box, shape, periodic=False, quad_order=2):
        self.box = box
        self.dim = box.dim
        if np.ndim(shape) == 0:
            shape = (int(shape),) * self.dim
        self.shape = tuple(int(s) for s in shape)
        if len(self.shape) != self.dim or min(self.shape) < 1:
            raise ValueError(f"bad grid shape {shape} for dimension {self.dim}")
        self.periodic = periodic
        self.h = box.lengths / np.array(self.shape)
        self.node_shape = self.shape if periodic else tuple(s + 1 for s in self.shape)
        self.n_nodes = int(np.prod(self.node_shape))
        self.n_elements = int(np.prod(self.shape))
        self.quad_order = quad_order
        self._setup_reference(quad_order)

    def __repr__(self):
        kind = "periodic" if self.periodic else "dirichlet"
        return f"StructuredGrid({self.box}, {self.shape}, {kind})"

    # -- reference element ---------------------------------------------------

    def _setup_reference(self, order):
        d = self.dim
        self.corners = np.array(list(itertools.product((0, 1), repeat=d)))  # (nv, d)
        g, gw = gauss_legendre(order)
        self.ref_points = np.array(list(itertools.product(g, repeat=d)))
        self.ref_weights = np.array([np.prod(c) for c in itertools.product(gw, repeat=d)])
        self.phi, self.dphi = self.reference_basis(self.ref_points)

    def reference_basis(self, xi):
        """Basis values ``(..., nv)`` and physical gradients ``(..., nv, d)`` at local coords."""
        xi = np.asarray(xi, dtype=float)
        c = self.corners
        # 1D factors: corner bit 0 -> 1 - s, bit 1 -> s
        fac = np.where(c == 1, xi[..., None, :], 1.0 - xi[..., None, :])
        dfac = np.where(c == 1, 1.0, -1.0) / self.h
        phi = np.prod(fac, axis=-1)
        dphi = np.empty(fac.shape)
        for k in range(self.dim):
            others = np.delete(fac, k, axis=-1)
            dphi[..., k] = dfac[:, k] * np.prod(others, axis=-1)
        return phi, dphi

    # -- topology ------------------------------------------------------------

    @cached_property
    def connectivity(self):
        """Global node index of each element corner, shape ``(ne, 2**d)``."""
        idx = np.array(list(np.ndindex(*self.shape)))  # (ne, d), C order
        out = np.empty((self.n_elements, len(self.corners)), dtype=np.int64)
        for v, c in enumerate(self.corners):
            nodes = idx + c
            if self.periodic:
                nodes = nodes % np.array(self.shape)
            out[:, v] = np.ravel_multi_index(tuple(nodes.T), self.node_shape)
        return out

    @cached_property
    def element_origin(self):
        idx = np.array(list(np.ndindex(*self.shape)), dtype=float)
        return np.asarray(self.box.lower) + idx * self.h

    @cached_property
    def nodes(self):
        idx = np.array(list(np.ndindex(*self.node_shape)), dtype=float)
        return np.asarray(self.box.lower) + idx * self.h

    @cached_property
    def boundary(self):
        if self.periodic:
            return np.zeros(self.n_nodes, dtype=bool)
        idx = np.array(list(np.ndindex(*self.node_shape)))
        return np.any((idx == 0) | (idx == np.array(self.shape)), axis=1)

    @cached_property
    def interior(self):
        return np.flatnonzero(~self.boundary)

    @cached_property
    def quad_points(self):
        """Physical quadrature points, shape ``(ne, nq, d)``."""
        return self.element_origin[:, None, :] + self.ref_points[None, :, :] * self.h

    @cached_property
    def quad_weights(self):
        return np.broadcast_to(self.ref_weights * np.prod(self.h), (self.n_elements, len(self.ref_weights)))

    @cached_property
    def nodal_weights(self):
        """Integrals of the basis functions (lumped mass)."""
        return self._scatter(np.broadcast_to(self.quad_weights @ self.phi, self.connectivity.shape))

    def _scatter(self, local):
        return np.bincount(self.connectivity.ravel(), weights=np.ravel(local), minlength=self.n_nodes)

    # -- assembly ------------------------------------------------------------

    def _sparse(self, local):
        conn = self.connectivity
        nv = conn.shape[1]
        rows = np.repeat(conn, nv, axis=1).ravel()
        cols = np.tile(conn, (1, nv)).ravel()
        mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(self.n_nodes, self.n_nodes))
        return mat.tocsr()

    def _weighted(self, coef):
        coef = np.asarray(coef, dtype=float)
        w = self.quad_weights
        return coef * w.reshape(w.shape + (1,) * (coef.ndim - 2))

    def mass(self, coef=1.0):
        """``M[i, j] = int c phi_j phi_i``."""
        c = self._weighted(np.broadcast_to(coef, self.quad_weights.shape))
        M = self._sparse(np.einsum("eq,qi,qj->eij", c, self.phi, self.phi))
        return ((M + M.T) * 0.5).tocsr()

    def stiffness(self, coef=1.0):
        """``K[i, j] = int (c grad phi_j) . grad phi_i`` for scalar or tensor ``c``."""
        coef = np.asarray(coef, dtype=float)
        if coef.ndim <= 2:
            c = self._weighted(np.broadcast_to(coef, self.quad_weights.shape))
            local = np.einsum("eq,qik,qjk->eij", c, self.dphi, self.dphi)
        else:
            c = self._weighted(coef)
            local = np.einsum("eqkl,qik,qjl->eij", c, self.dphi, self.dphi)
            if not np.array_equal(coef, np.swapaxes(coef, -1, -2)):
                return self._sparse(local)
        # symmetric coefficient: make the assembled matrix exactly symmetric
        K = self._sparse(local)
        return ((K + K.T) * 0.5).tocsr()

    def advection_trial(self, vec):
        """``[i, j] = int (v . grad phi_j) phi_i``."""
        v = self._weighted(np.asarray(vec, dtype=float))
        return self._sparse(np.einsum("eqk,qjk,qi->eij", v, self.dphi, self.phi))

    def advection_test(self, vec):
        """``[i, j] = int (v . grad phi_i) phi_j``."""
        v = self._weighted(np.asarray(vec, dtype=float))
        return self._sparse(np.einsum("eqk,qik,qj->eij", v, self.dphi, self.phi))

    def load(self, f):
        """``b_i = int f phi_i``."""
        c = self._weighted(np.broadcast_to(f, self.quad_weights.shape))
        return self._scatter(np.einsum("eq,qi->ei", c, self.phi))

    def load_gradient(self, vec):
        """``b_i = int v . grad phi_i``."""
        v = self._weighted(np.asarray(vec, dtype=float))
        return self._scatter(np.einsum("eqk,qik->ei", v, self.dphi))

    # -- field evaluation ----------------------------------------------------

    def values_at_quad(self, u):
        """``(..., ne, nq)`` values of nodal vector(s) ``u`` of shape ``(..., n_nodes)``."""
        return np.einsum("...ev,qv->...eq", np.asarray(u)[..., self.connectivity], self.phi)

    def gradients_at_quad(self, u):
        return np.einsum("...ev,qvk->...eqk", np.asarray(u)[..., self.connectivity], self.dphi)

    def integrate(self, values):
        """Integral of quadrature-point values ``(..., ne, nq)``."""
        return np.einsum("...eq,eq->...", values, self.quad_weights)

    def locate(self, points):
        """Element index and local coordinates in ``[0,1]^d`` of each point."""
        p = np.asarray(points, dtype=float)
        s = (p - np.asarray(self.box.lower)) / self.h
        if self.periodic:
            s = np.mod(s, np.array(self.shape, dtype=float))
        cell = np.floor(s).astype(np.int64)
        cell = np.clip(cell, 0, np.array(self.shape) - 1)
        xi = s - cell
        if not self.periodic:
            xi = np.clip(xi, 0.0, 1.0)
        elem = np.ravel_multi_index(tuple(np.moveaxis(cell, -1, 0)), self.shape)
        return elem, xi

    def interpolate(self, u, points):
        """Value of the FE function(s) ``u`` (shape ``(..., n_nodes)``) at ``points``."""
        elem, xi = self.locate(points)
        phi, _ = self.reference_basis(xi)
        vals = np.asarray(u)[..., self.connectivity[elem]]
        return np.sum(vals * phi, axis=-1)

    def interpolate_gradient(self, u, points):
        """Gradient of the FE function(s) ``u`` at ``points``, shape ``(..., npts, d)``."""
        elem, xi = self.locate(points)
        _, dphi = self.reference_basis(xi)
        vals = np.asarray(u)[..., self.connectivity[elem]]
        return np.einsum("...pv,pvk->...pk", vals, dphi)

    def recovered_gradient(self, u):
        """Nodal gradient by averaging the element gradients at each node.

        ``u`` has shape ``(..., n_nodes)``; result ``(..., n_nodes, d)``.
        """
        _, dphi_c = self.reference_basis(self.corners.astype(float))  # (nv corner, nv, d)
        vals = np.asarray(u)[..., self.connectivity]  # (..., ne, nv)
        g = np.einsum("...ev,cvk->...eck", vals, dphi_c)  # gradient of element e at its corner c
        lead = g.shape[:-3]
        acc = np.zeros(lead + (self.n_nodes, self.dim))
        cnt = np.zeros(self.n_nodes)
        # each node is corner c of at most one element, so plain fancy-index adds are safe
        for c in range(self.connectivity.shape[1]):
            nodes = self.connectivity[:, c]
            cnt[nodes] += 1.0
            acc[..., nodes, :] += g[..., :, c, :]
        return acc / cnt[:, None]

    def interpolation_matrix(self, points):
        """Sparse ``(npts, n_nodes)`` matrix evaluating FE functions at ``points``."""
        pts = np.asarray(points, dtype=float).reshape(-1, self.dim)
        elem, xi = self.locate(pts)
        phi, _ = self.reference_basis(xi)
        rows = np.repeat(np.arange(len(pts)), phi.shape[1])
        return sp.csr_matrix((phi.ravel(), (rows, self.connectivity[elem].ravel())), shape=(len(pts), self.n_nodes))
