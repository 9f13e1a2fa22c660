"""Five-parameter smile surface and its constrained least-squares fit.

The surface is a local volatility

    sigma(tau, y) = a tau + b - c exp(-d tau) cos(pi y / (2 e))   for |y| <= e
                  = a tau + b                                     otherwise

and is sampled onto a mesh as the diffusion ``sigma^2 / 2``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import dupire
from .errors import ConfigurationError
from .grids import LocalVolSurface, Mesh
from .quotes import QuoteSet

log = logging.getLogger(__name__)

# Strict lower bounds of the box are enforced as this floor.
FLOOR = 1e-14


@dataclass(frozen=True)
class Theta:
    a: float
    b: float
    c: float
    d: float
    e: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d, self.e], dtype=float)

    @classmethod
    def from_array(cls, x) -> "Theta":
        return cls(*map(float, x))

    def as_dict(self) -> dict:
        return asdict(self)

    def violations(self, tau_max: float) -> list[str]:
        out = []
        if not 0 < self.b <= 1:
            out.append(f"b={self.b} not in (0, 1]")
        if not 0 < self.a <= (1 - self.b) / tau_max + 1e-15:
            out.append(f"a={self.a} not in (0, (1-b)/tau_max]")
        if not 0 < self.c <= self.b:
            out.append(f"c={self.c} not in (0, b]")
        if not -1 <= self.d <= 1:
            out.append(f"d={self.d} not in [-1, 1]")
        if not 0 < self.e <= 2:
            out.append(f"e={self.e} not in (0, 2]")
        return out

    def check(self, tau_max: float) -> "Theta":
        bad = self.violations(tau_max)
        if bad:
            raise ConfigurationError("infeasible parameters: " + "; ".join(bad))
        return self


def project(x, tau_max: float) -> Theta:
    """Clip a raw parameter vector into the feasible box (b first, then a and c)."""
    a, b, c, d, e = map(float, x)
    b = min(max(b, FLOOR), 1.0 - FLOOR * tau_max)
    a = min(max(a, FLOOR), (1.0 - b) / tau_max)
    c = min(max(c, FLOOR), b)
    d = min(max(d, -1.0), 1.0)
    e = min(max(e, FLOOR), 2.0)
    return Theta(a, b, c, d, e)


def eval_parametric(theta: Theta, tau, y):
    tau = np.asarray(tau, dtype=float)
    y = np.asarray(y, dtype=float)
    level = theta.a * tau + theta.b
    inside = np.abs(y) <= theta.e
    smile = theta.c * np.exp(-theta.d * tau) * np.cos(np.pi * np.where(inside, y, 0.0) / (2.0 * theta.e))
    out = level - np.where(inside, smile, 0.0)
    return float(out) if out.ndim == 0 else out


def sample_parametric(theta: Theta, mesh: Mesh, **kw) -> LocalVolSurface:
    """Diffusion ``sigma^2 / 2`` of the parametric volatility on ``mesh``.

    Values are clipped into the surface bounds, which matters only where
    ``b - c`` is close to zero.
    """
    tt, yy = np.meshgrid(mesh.taus, mesh.ys, indexing="ij")
    sigma = eval_parametric(theta, tt, yy)
    lower, upper = kw.pop("lower", 1e-4), kw.pop("upper", 2.0)
    return LocalVolSurface(mesh, np.clip(0.5 * sigma**2, lower, upper), lower, upper, **kw)


@dataclass
class ParametricFit:
    theta: Theta
    objective: float
    initial_objective: float
    evaluations: int
    history: list[float] = field(default_factory=list)

    def report(self) -> dict:
        return {
            "theta": self.theta.as_dict(),
            "objective": self.objective,
            "initial_objective": self.initial_objective,
            "evaluations": self.evaluations,
        }


def fit_parametric(data: QuoteSet, init: Theta, mesh: Mesh, max_evals: int = 2000,
                   xatol: float = 1e-6, fatol: float = 1e-14) -> ParametricFit:
    """Least-squares fit of the parametric surface to normalized quotes.

    Nelder-Mead runs on the raw vector and every evaluation is projected
    onto the feasible box; the best projected point seen is returned, so
    the reported objective never exceeds the starting one.
    """
    init.check(mesh.tau_max)
    P = dupire.observation_matrix(mesh, data.taus, data.y)
    obs = data.v

    def objective(theta: Theta) -> float:
        v = dupire.solve_dupire(sample_parametric(theta, mesh))
        r = P @ v.values.ravel() - obs
        return float(r @ r)

    start = objective(init)
    best = [start, init]
    history = [start]

    def f(x):
        theta = project(x, mesh.tau_max)
        val = objective(theta)
        if val < best[0]:
            best[0], best[1] = val, theta
            history.append(val)
        return val

    x0 = init.as_array()
    # Nelder-Mead's default simplex step is 5% of each coordinate; d = 0 needs an explicit one.
    simplex = [x0] + [x0 + np.eye(5)[k] * (0.05 * abs(x0[k]) if x0[k] != 0 else 0.05) for k in range(5)]
    res = minimize(f, x0, method="Nelder-Mead",
                   options={"maxfev": max_evals, "xatol": xatol, "fatol": fatol,
                            "initial_simplex": np.array(simplex)})
    log.info("parametric fit: %d evaluations, objective %.6g -> %.6g (%s)", res.nfev, start, best[0], res.message)
    if not math.isfinite(best[0]):
        raise ConfigurationError("parametric objective is not finite")
    return ParametricFit(best[1], best[0], start, int(res.nfev), history)
