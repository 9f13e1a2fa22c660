"""Quote containers tied to an underlying futures vector."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError, DimensionError


@dataclass(frozen=True, eq=False)
class QuoteSet:
    """European call quotes for one index value ``s_l``.

    ``prices`` are undiscounted call values in currency, so the normalized
    data ``prices / F`` and the coordinates ``log(K / F)`` follow whatever
    futures vector is currently attached.
    """

    maturities: np.ndarray
    futures: np.ndarray
    maturity_index: np.ndarray
    strikes: np.ndarray
    prices: np.ndarray
    index: float = 0.0
    delta: float | None = None
    label: str = ""

    def __post_init__(self):
        mats = np.asarray(self.maturities, dtype=float)
        fut = np.asarray(self.futures, dtype=float)
        idx = np.asarray(self.maturity_index, dtype=int)
        strikes = np.asarray(self.strikes, dtype=float)
        prices = np.asarray(self.prices, dtype=float)
        if mats.shape != fut.shape or mats.ndim != 1:
            raise DimensionError("one futures price per maturity is required")
        if not (idx.shape == strikes.shape == prices.shape):
            raise DimensionError("strikes, prices and maturity indices must align")
        if idx.size and (idx.min() < 0 or idx.max() >= mats.size):
            raise DimensionError("maturity index out of range")
        if np.any(fut <= 0) or np.any(strikes <= 0) or np.any(mats <= 0):
            raise DataError("futures, strikes and maturities must be positive")
        if np.any(prices <= 0):
            raise DataError("call prices must be positive")
        for name, arr in (("maturities", mats), ("futures", fut), ("maturity_index", idx),
                          ("strikes", strikes), ("prices", prices)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_normalized(cls, maturities, futures, maturity_index, ys, values, **kw) -> "QuoteSet":
        futures = np.asarray(futures, dtype=float)
        f = futures[np.asarray(maturity_index, dtype=int)]
        return cls(maturities, futures, maturity_index, f * np.exp(ys), f * np.asarray(values), **kw)

    def __len__(self) -> int:
        return self.strikes.size

    @property
    def taus(self) -> np.ndarray:
        return self.maturities[self.maturity_index]

    @property
    def quote_futures(self) -> np.ndarray:
        return self.futures[self.maturity_index]

    @property
    def y(self) -> np.ndarray:
        return np.log(self.strikes / self.quote_futures)

    @property
    def v(self) -> np.ndarray:
        return self.prices / self.quote_futures

    def with_futures(self, futures) -> "QuoteSet":
        futures = np.asarray(futures, dtype=float)
        if futures.shape != self.futures.shape:
            raise DimensionError("replacement futures vector has the wrong length")
        return replace(self, futures=futures)

    def with_prices(self, prices) -> "QuoteSet":
        return replace(self, prices=np.asarray(prices, dtype=float))

    def subset(self, mask) -> "QuoteSet":
        mask = np.asarray(mask, dtype=bool)
        return replace(self, maturity_index=self.maturity_index[mask], strikes=self.strikes[mask],
                       prices=self.prices[mask])


def extend_to_horizon(data: QuoteSet, tau_max: float) -> QuoteSet:
    """Append a copy of the longest-maturity quotes at ``tau_max``.

    Used to give datasets with shorter maturity ladders a common horizon.
    """
    last = int(np.argmax(data.maturities))
    if data.maturities[last] >= tau_max - 1e-12:
        return data
    sel = data.maturity_index == last
    new = data.maturities.size
    return replace(
        data,
        maturities=np.append(data.maturities, tau_max),
        futures=np.append(data.futures, data.futures[last]),
        maturity_index=np.concatenate([data.maturity_index, np.full(sel.sum(), new)]),
        strikes=np.concatenate([data.strikes, data.strikes[sel]]),
        prices=np.concatenate([data.prices, data.prices[sel]]),
    )
