"""Black (1976) futures-option pricing in normalized coordinates.

Prices are undiscounted and divided by the futures price, so a call with
log-moneyness ``y = log(K/F)`` is worth ``Phi(d1) - exp(y) Phi(d2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ImpliedVolError

SIGMA_LO = 1e-6
SIGMA_HI = 10.0
PRICE_TOL = 1e-10
SIGMA_TOL = 1e-12


@dataclass(frozen=True)
class BlackQuote:
    forward: float
    strike: float
    tau: float
    rate: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.forward <= 0 or self.strike <= 0 or self.tau < 0 or self.sigma < 0:
            raise ValueError(f"invalid Black quote {self}")

    @property
    def y(self) -> float:
        return math.log(self.strike / self.forward)

    def price(self) -> float:
        """Discounted call price in currency."""
        return math.exp(-self.rate * self.tau) * self.forward * black_call_normalized(self.tau, self.y, self.sigma)


def black_call_normalized(tau, y, sigma):
    """Undiscounted normalized call price; vectorized over all arguments."""
    tau, y, sigma = np.broadcast_arrays(
        np.asarray(tau, dtype=float), np.asarray(y, dtype=float), np.asarray(sigma, dtype=float)
    )
    shape = tau.shape
    tau, y, sigma = (np.atleast_1d(x).ravel() for x in (tau, y, sigma))
    sd = sigma * np.sqrt(tau)
    intrinsic = np.maximum(0.0, -np.expm1(y))
    live = sd > 0
    out = intrinsic.copy()
    if np.any(live):
        s = sd[live]
        d1 = (-y[live] + 0.5 * s * s) / s
        out[live] = ndtr(d1) - np.exp(y[live]) * ndtr(d1 - s)
    out = np.maximum(out, intrinsic).reshape(shape)
    return float(out) if out.ndim == 0 else out


def black_vega_normalized(tau: float, y: float, sigma: float) -> float:
    s = sigma * math.sqrt(tau)
    if s <= 0:
        return 0.0
    d1 = (-y + 0.5 * s * s) / s
    return math.sqrt(tau) * math.exp(-0.5 * d1 * d1) / math.sqrt(2 * math.pi)


def implied_vol(price: float, tau: float, y: float, tol: float = PRICE_TOL) -> float:
    """Invert :func:`black_call_normalized` in ``sigma``.

    Newton steps are accepted only while they stay inside the current
    bracket; otherwise the bracket is bisected.
    """
    if tau <= 0:
        raise ImpliedVolError("implied vol needs tau > 0", bound="tau", value=tau)
    lower = max(0.0, -math.expm1(y))
    if not price > lower:
        raise ImpliedVolError(
            f"price {price:.17g} is not above intrinsic {lower:.17g}", bound="lower", value=lower
        )
    if not price < 1.0:
        raise ImpliedVolError(f"price {price:.17g} is not below 1", bound="upper", value=1.0)

    lo, hi = SIGMA_LO, SIGMA_HI
    f_lo = black_call_normalized(tau, y, lo) - price
    f_hi = black_call_normalized(tau, y, hi) - price
    if f_lo >= 0:
        return lo
    if f_hi <= 0:
        if f_hi > -tol:
            return hi
        raise ImpliedVolError(
            f"price {price:.17g} exceeds the sigma={SIGMA_HI} Black price", bound="upper", value=price - f_hi
        )

    # Start at the inflection point of the price in sigma when it is inside the bracket.
    sigma = min(max(math.sqrt(2.0 * abs(y) / tau), 0.2), 2.0)
    for _ in range(200):
        f = black_call_normalized(tau, y, sigma) - price
        if f == 0:
            return sigma
        if f > 0:
            hi = sigma
        else:
            lo = sigma
        vega = black_vega_normalized(tau, y, sigma)
        step = sigma - f / vega if vega > 0 else -1.0
        inside = lo < step < hi
        # Stop once the price matches and the Newton correction is negligible in sigma too.
        if abs(f) <= tol and vega > 0 and abs(f / vega) <= SIGMA_TOL * sigma:
            return step if inside else sigma
        sigma = step if inside else 0.5 * (lo + hi)
        if hi - lo < 1e-15 * hi:
            return sigma
    return sigma
