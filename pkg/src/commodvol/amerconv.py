"""American calls on futures by trinomial tree, and their conversion to European quotes.

The futures price is driftless under the pricing measure, so in
``x = log(F_t / F_0)`` the tree carries drift ``-sigma^2 / 2`` and
variance ``sigma^2 dt`` per step.  Node spacing is ``sigma_ref * sqrt(3 dt)``
with ``sigma_ref`` the largest volatility on the tree, which keeps all
branch probabilities in ``[0, 1]`` for local volatilities too.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np
from scipy.optimize import brentq

from .black import black_call_normalized
from .errors import ConfigurationError, ConversionError, DataError
from .quotes import QuoteSet

log = logging.getLogger(__name__)

SIGMA_BRACKET = (1e-4, 10.0)
SIGMA_XTOL = 1e-8
MIN_STEPS = 50


@dataclass(frozen=True)
class AmericanQuote:
    """A call on a futures contract; ``price`` is the quoted (discounted) premium."""

    future: float
    strike: float
    tau: float
    price: float
    rate: float = 0.0
    dividend_yield: float = 0.0
    style: str = "american"

    def __post_init__(self):
        if self.style not in ("american", "european"):
            raise DataError(f"style must be 'american' or 'european', got {self.style!r}")
        if not (self.future > 0 and self.strike > 0 and self.tau > 0):
            raise DataError(f"future, strike and tau must be positive: {self}")
        floor = self.intrinsic if self.style == "american" else math.exp(-self.rate * self.tau) * max(
            0.0, self.future - self.strike)
        if self.price < floor - 1e-12:
            raise ConversionError(f"price {self.price:.10g} below intrinsic {floor:.10g}", quote=self)

    @property
    def intrinsic(self) -> float:
        return max(0.0, self.future - self.strike)


@dataclass(frozen=True)
class TreeConfig:
    """``steps=None`` picks ``max(250, ceil(1000 * tau))``."""

    steps: int | None = None
    style: str = "american"

    def __post_init__(self):
        if self.steps is not None and self.steps < MIN_STEPS:
            raise ConfigurationError(f"tree needs at least {MIN_STEPS} steps, got {self.steps}")
        if self.style not in ("american", "european"):
            raise ConfigurationError(f"unknown exercise style {self.style!r}")

    def steps_for(self, tau: float) -> int:
        return self.steps if self.steps is not None else max(250, math.ceil(1000.0 * tau))


@numba.njit(cache=True, nogil=True)
def _black_call(f, K, sd):
    if sd <= 0.0:
        return max(0.0, f - K)
    d1 = (math.log(f / K) + 0.5 * sd * sd) / sd
    return 0.5 * f * math.erfc(-d1 / math.sqrt(2.0)) - 0.5 * K * math.erfc(-(d1 - sd) / math.sqrt(2.0))


@numba.njit(cache=True, nogil=True)
def _tree(F, K, r, dt, n, dx, sig, american):
    """Backward induction; ``sig`` is ``(1, 1)`` for constant volatility or ``(n, 2n+1)``.

    The last step before expiry uses the Black value instead of the
    three-branch expectation, which removes the payoff kink that makes
    plain trees converge erratically in the strike.
    """
    const = sig.shape[0] == 1
    width = 2 * n + 1
    vals = np.empty(width)
    disc = math.exp(-r * dt)
    for k in range(width):
        s = sig[0, 0] if const else sig[n - 1, k]
        f = F * math.exp((k - n) * dx)
        cont = disc * _black_call(f, K, s * math.sqrt(dt))
        if american and f - K > cont:
            cont = f - K
        vals[k] = cont
    nxt = np.empty(width)
    for i in range(n - 2, -1, -1):
        for k in range(n - i, n + i + 1):
            s = sig[0, 0] if const else sig[i, k]
            mu = -0.5 * s * s * dt
            m2 = (s * s * dt + mu * mu) / (dx * dx)
            pu = 0.5 * (m2 + mu / dx)
            pd = 0.5 * (m2 - mu / dx)
            pm = 1.0 - pu - pd
            cont = disc * (pu * vals[k + 1] + pm * vals[k] + pd * vals[k - 1])
            if american:
                ex = F * math.exp((k - n) * dx) - K
                if ex > cont:
                    cont = ex
            nxt[k] = cont
        for k in range(n - i, n + i + 1):
            vals[k] = nxt[k]
    return vals[n]


def _check(F, K, tau, r):
    if not (F > 0 and K > 0 and tau > 0):
        raise DataError(f"need F, K, tau > 0 (F={F}, K={K}, tau={tau})")
    if r < 0:
        raise DataError(f"rate must be non-negative, got {r}")


def trinomial_american_call(F: float, K: float, tau: float, r: float, sigma: float,
                            cfg: TreeConfig = TreeConfig()) -> float:
    """Call on a futures price with constant Black volatility ``sigma``."""
    _check(F, K, tau, r)
    if sigma < 0:
        raise DataError(f"sigma must be non-negative, got {sigma}")
    american = cfg.style == "american"
    if sigma == 0:
        europ = math.exp(-r * tau) * max(0.0, F - K)
        return max(F - K, europ) if american else europ
    n = cfg.steps_for(tau)
    dt = tau / n
    return float(_tree(F, K, r, dt, n, sigma * math.sqrt(3 * dt), np.full((1, 1), float(sigma)), american))


def local_vol_tree_call(F: float, K: float, tau: float, r: float, sigma: Callable, cfg: TreeConfig = TreeConfig(),
                        sigma_ref: float | None = None) -> float:
    """Call price when the volatility is a function ``sigma(t, log(F_t / F_0))``."""
    _check(F, K, tau, r)
    n = cfg.steps_for(tau)
    dt = tau / n
    t = (np.arange(n) * dt)[:, None]
    if sigma_ref is None:
        sigma_ref = float(np.max(sigma(t, np.linspace(-5.0, 5.0, 2001)[None, :])))
    dx = sigma_ref * math.sqrt(3 * dt)
    x = (np.arange(2 * n + 1) - n)[None, :] * dx
    sig = np.ascontiguousarray(np.broadcast_to(sigma(t, x), (n, 2 * n + 1)), dtype=float)
    if sig.max() > sigma_ref * (1 + 1e-12):
        raise ConfigurationError("sigma_ref must bound the local volatility")
    return float(_tree(F, K, r, dt, n, dx, sig, cfg.style == "american"))


# -- conversion ------------------------------------------------------------


@dataclass
class DropRecord:
    position: int
    tau: float
    strike: float
    price: float
    reason: str


@dataclass
class Conversion:
    quotes: QuoteSet
    implied_vols: np.ndarray
    kept: np.ndarray
    dropped: list[DropRecord] = field(default_factory=list)

    def report(self) -> dict:
        return {
            "kept": int(self.kept.sum()),
            "dropped": [vars(d) for d in self.dropped],
        }


class DegenerateQuote(ConversionError):
    """The tree price is flat in sigma at the quote (typically at intrinsic)."""


def american_implied_vol(quote: AmericanQuote, cfg: TreeConfig = TreeConfig()) -> float:
    """Black volatility at which the tree reproduces the American premium."""
    lo, hi = SIGMA_BRACKET
    tree_cfg = TreeConfig(cfg.steps, "american")

    def gap(s):
        return trinomial_american_call(quote.future, quote.strike, quote.tau, quote.rate, s, tree_cfg) - quote.price

    g_lo = gap(lo)
    if g_lo >= -1e-12 * max(1.0, quote.price):
        if quote.price <= quote.intrinsic + 1e-12 * quote.future or g_lo <= 1e-10:
            raise DegenerateQuote(
                f"price {quote.price:.10g} sits at the flat part of the tree price (intrinsic "
                f"{quote.intrinsic:.10g}); implied volatility is not identifiable", quote=quote)
        raise ConversionError(f"price {quote.price:.10g} below the sigma={lo} tree price", quote=quote)
    g_hi = gap(hi)
    if g_hi <= 0:
        raise ConversionError(f"price {quote.price:.10g} above the sigma={hi} tree price", quote=quote)
    return float(brentq(gap, lo, hi, xtol=SIGMA_XTOL, rtol=4 * np.finfo(float).eps))


def americans_to_europeans(quotes: Sequence[AmericanQuote], cfg: TreeConfig = TreeConfig(),
                           index: float = 0.0, label: str = "") -> Conversion:
    """Undiscounted European quotes at the American implied volatilities.

    Quotes flagged European pass through (undiscounted).  Quotes whose
    implied volatility is not identifiable are dropped and reported; a
    maturity left without quotes is an error.
    """
    quotes = list(quotes)
    if not quotes:
        raise DataError("no quotes to convert")
    taus = sorted({q.tau for q in quotes})
    fut = {}
    for q in quotes:
        if fut.setdefault(q.tau, q.future) != q.future:
            raise DataError(f"maturity {q.tau} has inconsistent futures prices")
    mat_of = {t: m for m, t in enumerate(taus)}
    vols = np.full(len(quotes), np.nan)
    kept = np.zeros(len(quotes), dtype=bool)
    prices = np.zeros(len(quotes))
    dropped = []
    for p, q in enumerate(quotes):
        if q.style == "european":
            prices[p] = q.price * math.exp(q.rate * q.tau)
            kept[p] = True
            continue
        try:
            s = american_implied_vol(q, cfg)
        except ConversionError as exc:
            reason = "degenerate" if isinstance(exc, DegenerateQuote) else "out_of_band"
            log.warning("dropping quote %d (tau=%g, K=%g): %s", p, q.tau, q.strike, exc)
            dropped.append(DropRecord(p, q.tau, q.strike, q.price, reason))
            continue
        vols[p] = s
        prices[p] = q.future * black_call_normalized(q.tau, math.log(q.strike / q.future), s)
        kept[p] = True
    for t in taus:
        if not any(k for k, q in zip(kept, quotes) if q.tau == t):
            raise ConversionError(f"every quote at maturity {t} was dropped")
    idx = np.array([mat_of[q.tau] for q in quotes])
    qs = QuoteSet(
        maturities=np.array(taus),
        futures=np.array([fut[t] for t in taus]),
        maturity_index=idx[kept],
        strikes=np.array([q.strike for q in quotes])[kept],
        prices=prices[kept],
        index=index,
        label=label,
    )
    return Conversion(qs, vols, kept, dropped)
