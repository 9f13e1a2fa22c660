"""Independent reference implementations used to derive frozen test values.

Nothing here imports the solver internals: the Black formula comes from
scipy.stats, the Crank-Nicolson oracle assembles full sparse matrices and
solves them with spsolve, the American oracle is a CRR binomial tree.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.stats import norm


def black_normalized(tau, y, sigma):
    """Undiscounted call price divided by the futures price."""
    tau, y, sigma = (np.atleast_1d(x) for x in np.broadcast_arrays(*(np.asarray(x, dtype=float)
                                                                    for x in (tau, y, sigma))))
    out = np.maximum(0.0, 1.0 - np.exp(y))
    sd = sigma * np.sqrt(tau)
    live = sd > 0
    d1 = (-y[live] + 0.5 * sd[live] ** 2) / sd[live]
    out = out.astype(float)
    out[live] = norm.cdf(d1) - np.exp(y[live]) * norm.cdf(d1 - sd[live])
    return out if out.size > 1 else float(out[0])


def dense_dupire(a: np.ndarray, dtau: float, dy: float) -> np.ndarray:
    """Crank-Nicolson for v_tau = a (v_yy - v_y) with full matrices.

    Level ``i`` solves ``(Id - dtau/2 L_i) v^i = (Id + dtau/2 L_{i-1}) v^{i-1}``
    where ``L_i`` is the centered operator with coefficients ``a[i]``;
    boundary rows impose ``v = 1`` at ``y = -5`` and ``v = 0`` at ``y = 5``.
    The right-hand side also uses the Dirichlet values at the previous
    level (the matrix form), which differs from the initial payoff
    ``1 - e^{-5}`` only on the first step.
    """
    nt, ny = a.shape
    J = (ny - 1) // 2
    ys = np.arange(-J, J + 1) * dy

    def op(ai):
        lo = ai[1:-1] * (1 / dy**2 + 1 / (2 * dy))
        mid = ai[1:-1] * (-2 / dy**2)
        hi = ai[1:-1] * (1 / dy**2 - 1 / (2 * dy))
        m = sp.lil_matrix((ny, ny))
        for k in range(1, ny - 1):
            m[k, k - 1] = lo[k - 1]
            m[k, k] = mid[k - 1]
            m[k, k + 1] = hi[k - 1]
        return m.tocsr()

    eye = sp.identity(ny, format="csr")
    v = np.zeros((nt, ny))
    v[0] = np.maximum(0.0, 1.0 - np.exp(ys))
    for i in range(1, nt):
        lhs = (eye - 0.5 * dtau * op(a[i])).tolil()
        prev = v[i - 1].copy()
        prev[0], prev[-1] = 1.0, 0.0
        rhs = (eye + 0.5 * dtau * op(a[i - 1])) @ prev
        for k, val in ((0, 1.0), (ny - 1, 0.0)):
            lhs[k, :] = 0.0
            lhs[k, k] = 1.0
            rhs[k] = val
        v[i] = spsolve(lhs.tocsr(), rhs)
    return v


def bilinear(grid: np.ndarray, dtau: float, dy: float, tau: float, y: float) -> float:
    J = (grid.shape[1] - 1) // 2
    ft, fy = tau / dtau, y / dy + J
    i, j = min(int(ft), grid.shape[0] - 2), min(int(fy), grid.shape[1] - 2)
    wt, wy = ft - i, fy - j
    return float((1 - wt) * (1 - wy) * grid[i, j] + (1 - wt) * wy * grid[i, j + 1]
                 + wt * (1 - wy) * grid[i + 1, j] + wt * wy * grid[i + 1, j + 1])


def central_difference(f, x: np.ndarray, direction: np.ndarray, h: float) -> float:
    return (f(x + h * direction) - f(x - h * direction)) / (2 * h)


def crr_american_futures_call(F, K, tau, r, sigma, steps=2000, american=True) -> float:
    """Cox-Ross-Rubinstein tree for a call on a driftless futures price."""
    dt = tau / steps
    u = math.exp(sigma * math.sqrt(dt))
    d = 1 / u
    p = (1 - d) / (u - d)
    disc = math.exp(-r * dt)
    f = F * u ** np.arange(steps, -steps - 1, -2, dtype=float)
    val = np.maximum(f - K, 0.0)
    for n in range(steps - 1, -1, -1):
        f = F * u ** np.arange(n, -n - 1, -2, dtype=float)
        val = disc * (p * val[:-1] + (1 - p) * val[1:])
        if american:
            val = np.maximum(val, f - K)
    return float(val[0])


def heston_mc_call(kappa, theta, sigma, rho, V0, S0, r, K, tau, n_paths=100_000, steps=200, seed=7):
    """Full-truncation Euler price of a European call with its standard error."""
    rng = np.random.default_rng(seed)
    dt = tau / steps
    x = np.full(n_paths, math.log(S0))
    v = np.full(n_paths, V0)
    for _ in range(steps):
        z1 = rng.standard_normal(n_paths)
        z2 = rho * z1 + math.sqrt(1 - rho**2) * rng.standard_normal(n_paths)
        vp = np.maximum(v, 0.0)
        x += (r - 0.5 * vp) * dt + np.sqrt(vp * dt) * z1
        v += kappa * (theta - vp) * dt + sigma * np.sqrt(vp * dt) * z2
    pay = math.exp(-r * tau) * np.maximum(np.exp(x) - K, 0.0)
    return float(pay.mean()), float(pay.std(ddof=1) / math.sqrt(n_paths))


def bs_call(S0, K, tau, r, sigma) -> float:
    F = S0 * math.exp(r * tau)
    return math.exp(-r * tau) * F * float(black_normalized(tau, math.log(K / F), sigma))
