"""Synthetic data, Heston reference prices and Monte Carlo for Asian calls."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from . import dupire
from .errors import ConfigurationError, DataError, NumericalError
from .grids import LocalVolSurface, Mesh, eval_surface
from .quotes import QuoteSet

log = logging.getLogger(__name__)


# -- ground truth ----------------------------------------------------------


def truth_sigma(tau, y):
    """Reference local volatility: a cosine dip of depth ``0.16 e^{-tau/2}`` around ``y = 0``."""
    tau = np.asarray(tau, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(tau < 0):
        raise DataError("tau must be non-negative")
    inner = 0.4 - 0.16 * np.exp(-0.5 * tau) * np.cos(1.25 * np.pi * y)
    out = np.where(np.abs(y) <= 0.4, inner, 0.4)
    return float(out) if out.ndim == 0 else out


def truth_surface(mesh: Mesh, **kw) -> LocalVolSurface:
    return LocalVolSurface.from_function(mesh, truth_sigma, **kw)


def synth_futures_curve(taus) -> np.ndarray:
    taus = np.asarray(taus, dtype=float)
    if np.any(taus <= 0):
        raise DataError("maturities must be positive")
    return 1.0 + 0.1 * np.sin(3.0 * np.pi * taus)


def add_noise(v, delta: float, seed: int | None) -> np.ndarray:
    """Relative Gaussian noise ``v (1 + delta * eta)``."""
    if delta < 0:
        raise ConfigurationError("noise level must be non-negative")
    v = np.asarray(v, dtype=float)
    if delta == 0:
        return v.copy()
    eta = np.random.default_rng(seed).standard_normal(v.shape)
    return v * (1.0 + delta * eta)


def make_synthetic_quotes(surface: LocalVolSurface, maturities: Sequence[float], ys: Sequence[float],
                          futures: Sequence[float] | float = 1.0, delta: float = 0.0,
                          seed: int | None = None, index: float = 0.0, label: str = "") -> QuoteSet:
    """European quotes from the Dupire solution on ``surface.mesh``.

    Strikes are ``F_m * exp(y_j)`` for every maturity ``m``; prices are the
    (optionally noisy) normalized solution times ``F_m``.
    """
    maturities = np.asarray(maturities, dtype=float)
    ys = np.asarray(ys, dtype=float)
    futures = np.broadcast_to(np.asarray(futures, dtype=float), maturities.shape).copy()
    v = dupire.solve_dupire(surface)
    mi = np.repeat(np.arange(maturities.size), ys.size)
    yy = np.tile(ys, maturities.size)
    clean = dupire.observe(v, np.column_stack([maturities[mi], yy]))
    values = add_noise(clean, delta, seed)
    if np.any(values <= 0):
        raise DataError("noisy prices must stay positive; reduce the noise level or the strike range")
    return QuoteSet.from_normalized(maturities, futures, mi, yy, values, index=index, delta=delta, label=label)


def online_quotes(surface: LocalVolSurface, maturities, ys, ds: float, count: int, s_start: float = 0.8,
                  delta: float = 0.01, seed: int = 0) -> list[QuoteSet]:
    """``count`` datasets at index values ``s_start + l * ds`` with independent noise.

    The underlying for dataset ``l`` is flat at its index value.
    """
    seeds = np.random.SeedSequence(seed).spawn(count)
    out = []
    for l in range(count):
        s = s_start + l * ds
        out.append(make_synthetic_quotes(surface, maturities, ys, futures=s, delta=delta,
                                         seed=int(seeds[l].generate_state(1)[0]), index=s, label=f"s={s:.4f}"))
    return out


# -- Heston ----------------------------------------------------------------


@dataclass(frozen=True)
class HestonParams:
    mu: float = 0.035
    kappa: float = 2.0
    theta: float = 0.04
    sigma: float = 0.2
    rho: float = 0.1
    V0: float = 0.2
    S0: float = 1.0
    r: float = 0.035

    def __post_init__(self):
        if min(self.kappa, self.theta, self.sigma, self.V0, self.S0) <= 0:
            raise ConfigurationError(f"kappa, theta, sigma, V0 and S0 must be positive: {self}")
        if abs(self.rho) > 1:
            raise ConfigurationError(f"|rho| must not exceed 1, got {self.rho}")

    def forward(self, tau: float) -> float:
        return self.S0 * math.exp(self.r * tau)


def _log1p_complex(z):
    """``log(1 + z)`` accurate for small complex ``z`` (numpy's is not)."""
    x, y = z.real, z.imag
    return 0.5 * np.log1p(x * (2.0 + x) + y * y) + 1j * np.arctan2(y, 1.0 + x)


def heston_cf(p: HestonParams, u, tau: float):
    """Characteristic function of ``log(S_tau / F_tau)`` (the stable branch).

    ``b - d`` is formed as ``-sigma^2 (iu + u^2) / (b + d)`` so that the
    small vol-of-vol limit does not cancel catastrophically.
    """
    u = np.asarray(u, dtype=complex)
    iu = 1j * u
    b = p.kappa - p.rho * p.sigma * iu
    d = np.sqrt(b * b + p.sigma**2 * (iu + u * u))
    bmd = -p.sigma**2 * (iu + u * u) / (b + d)
    g = bmd / (b + d)
    e = np.exp(-d * tau)
    log_ratio = _log1p_complex(-g * e) - _log1p_complex(-g)
    C = p.kappa * p.theta * (bmd * tau / p.sigma**2 - 2.0 * log_ratio / p.sigma**2)
    D = bmd / p.sigma**2 * (1.0 - e) / (1.0 - g * e)
    return np.exp(C + D * p.V0)


def heston_european_call(p: HestonParams, K: float, tau: float, abs_tol: float = 1e-10) -> float:
    """Discounted call price from a single Fourier integral along ``Im u = -1/2``."""
    if K <= 0 or tau <= 0:
        raise DataError("strike and maturity must be positive")
    F = p.forward(tau)
    k = math.log(F / K)

    def integrand(u):
        return (np.exp(1j * u * k) * heston_cf(p, u - 0.5j, tau)).real / (u * u + 0.25)

    val, err = integrate.quad(integrand, 0.0, np.inf, epsabs=abs_tol, epsrel=1e-10, limit=500)
    if not math.isfinite(val) or err > 1e-6:
        raise NumericalError(f"Heston integral did not converge (estimate {val}, error {err})")
    return math.exp(-p.r * tau) * (F - math.sqrt(F * K) / math.pi * val)


def heston_quotes(p: HestonParams, maturities, ys) -> QuoteSet:
    """European quotes at ``K = F_tau * exp(y)``; prices stored undiscounted."""
    maturities = np.asarray(maturities, dtype=float)
    ys = np.asarray(ys, dtype=float)
    mi = np.repeat(np.arange(maturities.size), ys.size)
    yy = np.tile(ys, maturities.size)
    F = np.array([p.forward(t) for t in maturities])
    strikes = F[mi] * np.exp(yy)
    prices = np.array([heston_european_call(p, K, maturities[m]) * math.exp(p.r * maturities[m])
                       for K, m in zip(strikes, mi)])
    return QuoteSet(maturities, F, mi, strikes, prices, label="heston")


# -- Monte Carlo for Asian calls -------------------------------------------


@dataclass(frozen=True)
class AsianSpec:
    """Asian call on ``S`` sampled at ``t_j = j * T / N`` for ``j = 0..N``.

    ``averaging="sum_over_n"`` divides the ``N + 1`` samples by ``N``;
    ``"mean"`` divides by ``N + 1``.
    """

    strike: float
    maturity: float
    n_avg: int = 100
    n_paths: int = 10_000
    seed: int = 0
    averaging: str = "sum_over_n"

    def __post_init__(self):
        if self.averaging not in ("sum_over_n", "mean"):
            raise ConfigurationError(f"unknown averaging {self.averaging!r}")
        if self.n_avg < 1 or self.n_paths < 1:
            raise ConfigurationError("need at least one averaging date and one path")
        if self.maturity <= 0 or self.strike < 0:
            raise ConfigurationError("maturity must be positive and strike non-negative")


@dataclass(frozen=True)
class BlackScholesModel:
    sigma: float
    S0: float = 1.0
    r: float = 0.0


@dataclass(frozen=True)
class LocalVolModel:
    surface: LocalVolSurface
    S0: float = 1.0
    r: float = 0.0


@dataclass(frozen=True)
class HestonModel:
    params: HestonParams


BLOCK = 1000


def _blocks(spec: AsianSpec):
    """Yield ``(generator, size)`` per fixed-size block of paths.

    Each block owns a Philox stream keyed by its position, so path ``j`` is
    the same however the blocks are scheduled.
    """
    for b, start in enumerate(range(0, spec.n_paths, BLOCK)):
        size = min(BLOCK, spec.n_paths - start)
        ss = np.random.SeedSequence(spec.seed, spawn_key=(b,))
        yield np.random.Generator(np.random.Philox(ss)), size


def _log_paths(spec: AsianSpec, r: float, S0: float, vol: Callable[[float, np.ndarray], np.ndarray]) -> np.ndarray:
    """Running sums of ``S_{t_j}`` from Euler steps on ``X = log(S e^{-rt} / S0)``."""
    dt = spec.maturity / spec.n_avg
    sums = []
    for gen, size in _blocks(spec):
        z = gen.standard_normal((size, spec.n_avg))
        x = np.zeros(size)
        total = np.full(size, S0)
        for j in range(spec.n_avg):
            s = vol(j * dt, x)
            x = x - 0.5 * s * s * dt + s * math.sqrt(dt) * z[:, j]
            total += S0 * np.exp(x + r * (j + 1) * dt)
        sums.append(total)
    return np.concatenate(sums)


def _heston_sums(spec: AsianSpec, p: HestonParams) -> np.ndarray:
    dt = spec.maturity / spec.n_avg
    sq = math.sqrt(dt)
    rho_c = math.sqrt(1.0 - p.rho**2)
    sums = []
    for gen, size in _blocks(spec):
        z = gen.standard_normal((size, spec.n_avg, 2))
        S = np.full(size, p.S0)
        V = np.full(size, p.V0)
        total = S.copy()
        for j in range(spec.n_avg):
            vp = np.maximum(V, 0.0)
            w1 = z[:, j, 0]
            w2 = p.rho * w1 + rho_c * z[:, j, 1]
            S = S + p.mu * S * dt + np.sqrt(vp) * S * sq * w1
            V = V + p.kappa * (p.theta - vp) * dt + p.sigma * np.sqrt(vp) * sq * w2
            total += S
        sums.append(total)
    return np.concatenate(sums)


def mc_asian(model, spec: AsianSpec) -> tuple[float, float]:
    """Discounted Asian call price and its standard error."""
    if isinstance(model, HestonModel):
        r = model.params.r
        sums = _heston_sums(spec, model.params)
    elif isinstance(model, BlackScholesModel):
        if model.sigma < 0:
            raise ConfigurationError("sigma must be non-negative")
        r = model.r
        sums = _log_paths(spec, r, model.S0, lambda t, x: np.full_like(x, model.sigma))
    elif isinstance(model, LocalVolModel):
        r = model.r
        surf = model.surface
        sums = _log_paths(spec, r, model.S0, lambda t, x: np.sqrt(2.0 * eval_surface(surf, np.full_like(x, t), x)))
    else:
        raise ConfigurationError(f"unknown model {type(model).__name__}")
    divisor = spec.n_avg if spec.averaging == "sum_over_n" else spec.n_avg + 1
    payoff = np.maximum(0.0, sums / divisor - spec.strike)
    disc = math.exp(-r * spec.maturity)
    se = disc * payoff.std(ddof=1) / math.sqrt(payoff.size) if payoff.size > 1 else 0.0
    return disc * float(payoff.mean()), float(se)
