"""Crank-Nicolson solver for the normalized Dupire problem.

    v_tau = a(tau, y) (v_yy - v_y),   v(0, y) = max(0, 1 - e^y),
    v(tau, -5) = 1,   v(tau, 5) = 0.

Each level solves ``[Id + M(a^i)] v^i + b(a^i) = [Id - M(a^{i-1})] v^{i-1} - b(a^{i-1})``
by Thomas elimination.  The adjoint sweep and the exact discrete gradient of
the quadratic misfit live here too because they share the stencil.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, DomainError, SolverInstabilityError
from .grids import LocalVolSurface, Mesh, PriceSurface

LEFT_BC = 1.0
RIGHT_BC = 0.0


@numba.njit(cache=True, nogil=True)
def thomas(sub, diag, sup, rhs):
    """Solve a tridiagonal system without pivoting.

    ``sub[k]`` multiplies ``x[k-1]`` and ``sup[k]`` multiplies ``x[k+1]`` in
    row ``k``; ``sub[0]`` and ``sup[-1]`` are ignored.
    """
    n = diag.shape[0]
    c = np.empty(n)
    d = np.empty(n)
    c[0] = sup[0] / diag[0]
    d[0] = rhs[0] / diag[0]
    for k in range(1, n):
        m = diag[k] - sub[k] * c[k - 1]
        c[k] = sup[k] / m
        d[k] = (rhs[k] - sub[k] * d[k - 1]) / m
    x = np.empty(n)
    x[n - 1] = d[n - 1]
    for k in range(n - 2, -1, -1):
        x[k] = d[k] - c[k] * x[k + 1]
    return x


@numba.njit(cache=True, nogil=True)
def _stencil(eta, beta):
    return 0.5 * (0.5 * beta - eta), -0.5 * (0.5 * beta + eta)


@numba.njit(cache=True, nogil=True)
def _apply_t(v, eta, up, lo):
    """``T v`` on interior nodes with the matrix-form boundary values 1 and 0."""
    ny = v.shape[0]
    out = np.empty(ny - 2)
    for k in range(1, ny - 1):
        left = v[k - 1] if k > 1 else LEFT_BC
        right = v[k + 1] if k < ny - 2 else RIGHT_BC
        out[k - 1] = lo * left + eta * v[k] + up * right
    return out


@numba.njit(cache=True, nogil=True)
def _cn_forward(a, v0, eta, beta):
    nt, ny = a.shape
    n = ny - 2
    up, lo = _stencil(eta, beta)
    v = np.empty((nt, ny))
    v[0, :] = v0
    sub = np.empty(n)
    diag = np.empty(n)
    sup = np.empty(n)
    rhs = np.empty(n)
    for i in range(1, nt):
        tv = _apply_t(v[i - 1], eta, up, lo)
        for k in range(n):
            ai = a[i, k + 1]
            rhs[k] = v[i - 1, k + 1] - a[i - 1, k + 1] * tv[k]
            sub[k] = lo * ai
            diag[k] = 1.0 + eta * ai
            sup[k] = up * ai
            if abs(diag[k]) < abs(sub[k]) + abs(sup[k]):
                return v, i
        rhs[0] -= sub[0] * LEFT_BC
        x = thomas(sub, diag, sup, rhs)
        for k in range(n):
            if not np.isfinite(x[k]):
                return v, i
            v[i, k + 1] = x[k]
        v[i, 0] = LEFT_BC
        v[i, ny - 1] = RIGHT_BC
    return v, -1


@numba.njit(cache=True, nogil=True)
def _cn_adjoint(a, g, eta, beta):
    """Backward sweep ``[Id + M(a^i)]^T u^i = [Id - M(a^i)]^T u^{i+1} + g^i``, ``u^{I+1} = 0``."""
    nt, ny = a.shape
    n = ny - 2
    up, lo = _stencil(eta, beta)
    u = np.zeros((nt + 1, ny))
    sub = np.empty(n)
    diag = np.empty(n)
    sup = np.empty(n)
    rhs = np.empty(n)
    for i in range(nt - 1, 0, -1):
        for k in range(n):
            j = k + 1
            w = u[i + 1, j]
            bt = eta * a[i, j] * w
            if k + 1 < n:
                bt += lo * a[i, j + 1] * u[i + 1, j + 1]
            if k > 0:
                bt += up * a[i, j - 1] * u[i + 1, j - 1]
            rhs[k] = w - bt + g[i, j]
            diag[k] = 1.0 + eta * a[i, j]
            sub[k] = up * a[i, j - 1] if k > 0 else 0.0
            sup[k] = lo * a[i, j + 1] if k + 1 < n else 0.0
        x = thomas(sub, diag, sup, rhs)
        for k in range(n):
            if not np.isfinite(x[k]):
                return u, i
            u[i, k + 1] = x[k]
    return u, -1


@numba.njit(cache=True, nogil=True)
def _assemble_gradient(v, u, eta, beta):
    nt, ny = v.shape
    up, lo = _stencil(eta, beta)
    grad = np.zeros((nt, ny))
    for i in range(nt):
        tv = _apply_t(v[i], eta, up, lo)
        for k in range(ny - 2):
            grad[i, k + 1] = -tv[k] * (u[i, k + 1] + u[i + 1, k + 1])
    return grad


@dataclass(frozen=True, eq=False)
class CNSystem:
    """Banded form of ``M(a^i)`` and ``b(a^i)`` for one time level (interior nodes)."""

    sub: np.ndarray
    diag: np.ndarray
    sup: np.ndarray
    b: np.ndarray

    @classmethod
    def at_level(cls, a: LocalVolSurface, i: int) -> "CNSystem":
        mesh = a.mesh
        up, lo = _stencil(mesh.eta, mesh.beta)
        ai = a.values[i, 1:-1]
        b = np.zeros_like(ai)
        b[0] = lo * ai[0] * LEFT_BC
        return cls(sub=lo * ai, diag=mesh.eta * ai, sup=up * ai, b=b)

    def matrix(self) -> sp.csr_matrix:
        n = self.diag.size
        return sp.diags([self.sub[1:], self.diag, self.sup[:-1]], [-1, 0, 1], shape=(n, n), format="csr")


def initial_condition(mesh: Mesh) -> np.ndarray:
    return np.maximum(0.0, -np.expm1(mesh.ys))


def _raw_solve(values: np.ndarray, mesh: Mesh) -> np.ndarray:
    v, bad = _cn_forward(np.ascontiguousarray(values, dtype=float), initial_condition(mesh), mesh.eta, mesh.beta)
    if bad >= 0:
        raise SolverInstabilityError(
            f"Crank-Nicolson step lost diagonal dominance or produced non-finite values at level {bad} "
            f"(tau={bad * mesh.dtau:.6g})",
            level=bad,
        )
    return v


def solve_dupire(a: LocalVolSurface) -> PriceSurface:
    """Normalized call prices on the whole lattice for diffusion ``a``."""
    return PriceSurface(a.mesh, _raw_solve(a.values, a.mesh))


# -- observation operator --------------------------------------------------


def observation_matrix(mesh: Mesh, taus, ys) -> sp.csr_matrix:
    """Sparse bilinear interpolation weights mapping the flattened grid to the points."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    if taus.shape != ys.shape:
        raise DimensionError("tau and y arrays must have the same length")
    ymax = mesh.J * mesh.dy
    eps = 1e-12
    bad = (taus < -eps) | (taus > mesh.tau_max + eps) | (np.abs(ys) > ymax + eps)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise DomainError(
            f"observation point (tau={taus[k]:.6g}, y={ys[k]:.6g}) outside [0, {mesh.tau_max:g}] x [-{ymax:g}, {ymax:g}]"
        )
    ny = 2 * mesh.J + 1
    ft = np.clip(taus / mesh.dtau, 0, mesh.I)
    fy = np.clip((ys + ymax) / mesh.dy, 0, ny - 1)
    i = np.minimum(np.floor(ft + 1e-9).astype(int), mesh.I - 1)
    j = np.minimum(np.floor(fy + 1e-9).astype(int), ny - 2)
    wt = np.clip(ft - i, 0.0, 1.0)
    wy = np.clip(fy - j, 0.0, 1.0)
    rows = np.repeat(np.arange(taus.size), 4)
    cols = np.stack([i * ny + j, i * ny + j + 1, (i + 1) * ny + j, (i + 1) * ny + j + 1], axis=1).ravel()
    vals = np.stack([(1 - wt) * (1 - wy), (1 - wt) * wy, wt * (1 - wy), wt * wy], axis=1).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(taus.size, (mesh.I + 1) * ny))


def observe(v: PriceSurface, points) -> np.ndarray:
    """Bilinear interpolation of ``v`` at ``(tau, y)`` pairs."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return observation_matrix(v.mesh, pts[:, 0], pts[:, 1]) @ v.values.ravel()


# -- adjoint ---------------------------------------------------------------


def solve_adjoint(a: LocalVolSurface, v: PriceSurface, spikes: np.ndarray) -> np.ndarray:
    """Adjoint field ``u`` of shape ``(I+2, 2J+1)``; rows 0 and ``I+1`` are zero.

    ``spikes`` holds ``dJ/dv`` on the lattice, i.e. ``2 P^T (P v - v_data)``
    reshaped to the grid.  Level 0 and the Dirichlet columns are ignored.
    """
    mesh = a.mesh
    g = np.array(spikes, dtype=float).reshape(mesh.shape)
    u, bad = _cn_adjoint(np.ascontiguousarray(a.values), g, mesh.eta, mesh.beta)
    if bad >= 0:
        raise SolverInstabilityError(f"adjoint sweep produced non-finite values at level {bad}", level=bad)
    return u


def grad_J(a: LocalVolSurface, v: PriceSurface, u: np.ndarray) -> np.ndarray:
    """Gradient of the misfit with respect to every node of ``a``.

    ``dJ/da^i = (dtau/2) [D_yy - D_y] v^i : (u^i + u^{i+1})`` on interior
    nodes and zero on the Dirichlet columns.
    """
    if u.shape != (a.mesh.I + 2, 2 * a.mesh.J + 1):
        raise DimensionError(f"adjoint field shape {u.shape} does not match mesh")
    return _assemble_gradient(np.ascontiguousarray(v.values), u, a.mesh.eta, a.mesh.beta)
