"""Quote CSV files.

One row per option::

    trade_date,index_value,future_maturity,option_maturity_years,futures_price,strike,option_price,style,rate
    2013-09-04,1.0,2013-10-29,0.1527777777777778,1.0,0.95,0.0712,A,0.03

``option_price`` is the quoted (discounted) premium, ``style`` is ``A`` or
``E``.  A blank ``option_maturity_years`` is filled from the dates with the
ACT/360 convention.  Rows are grouped into one quote set per
``(trade_date, index_value)``.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .amerconv import AmericanQuote
from .errors import DataError
from .quotes import QuoteSet

COLUMNS = ("trade_date", "index_value", "future_maturity", "option_maturity_years", "futures_price",
           "strike", "option_price", "style", "rate")
DAYS_PER_YEAR = 360.0


def year_fraction(start: dt.date, end: dt.date) -> float:
    """ACT/360."""
    return (end - start).days / DAYS_PER_YEAR


@dataclass(frozen=True)
class QuoteRow:
    trade_date: dt.date
    index_value: float
    future_maturity: dt.date
    tau: float
    future: float
    strike: float
    price: float
    style: str
    rate: float
    # Text of the price field as read, so pass-through rows are written back unchanged.
    price_text: str | None = None

    def to_american(self) -> AmericanQuote:
        return AmericanQuote(self.future, self.strike, self.tau, self.price, self.rate, self.rate,
                             "american" if self.style == "A" else "european")

    def as_record(self) -> list[str]:
        return [
            self.trade_date.isoformat(), repr(self.index_value), self.future_maturity.isoformat(),
            repr(self.tau), repr(self.future), repr(self.strike),
            self.price_text if self.price_text is not None else repr(self.price), self.style, repr(self.rate),
        ]


def _parse_date(text: str, name: str, lineno: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"line {lineno}: {name} {text!r} is not an ISO date") from None


def _parse_float(text: str, name: str, lineno: int) -> float:
    try:
        x = float(text)
    except ValueError:
        raise DataError(f"line {lineno}: {name} {text!r} is not a number") from None
    if not math.isfinite(x):
        raise DataError(f"line {lineno}: {name} must be finite")
    return x


def read_quote_rows(path: str | Path) -> list[QuoteRow]:
    try:
        return _read(path)
    except DataError as exc:
        msg = str(exc)
        raise DataError(msg if msg.startswith(f"{path}:") else f"{path}: {msg}") from None


def _read(path) -> list[QuoteRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != COLUMNS:
            raise DataError(f"{path}: line 1: expected header {','.join(COLUMNS)}")
        for rec in reader:
            lineno = reader.line_num
            if not rec or all(not f.strip() for f in rec):
                continue
            if len(rec) != len(COLUMNS):
                raise DataError(f"{path}: line {lineno}: expected {len(COLUMNS)} fields, got {len(rec)}")
            f = dict(zip(COLUMNS, rec))
            trade = _parse_date(f["trade_date"], "trade_date", lineno)
            fut_mat = _parse_date(f["future_maturity"], "future_maturity", lineno)
            if f["option_maturity_years"].strip():
                tau = _parse_float(f["option_maturity_years"], "option_maturity_years", lineno)
            else:
                tau = year_fraction(trade, fut_mat)
            style = f["style"].strip().upper()
            if style not in ("A", "E"):
                raise DataError(f"{path}: line {lineno}: style must be A or E, got {f['style']!r}")
            row = QuoteRow(
                trade_date=trade,
                index_value=_parse_float(f["index_value"], "index_value", lineno),
                future_maturity=fut_mat,
                tau=tau,
                future=_parse_float(f["futures_price"], "futures_price", lineno),
                strike=_parse_float(f["strike"], "strike", lineno),
                price=_parse_float(f["option_price"], "option_price", lineno),
                style=style,
                rate=_parse_float(f["rate"], "rate", lineno),
                price_text=f["option_price"],
            )
            if row.tau <= 0 or row.future <= 0 or row.strike <= 0 or row.price <= 0:
                raise DataError(f"{path}: line {lineno}: maturity, futures, strike and price must be positive")
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no quotes")
    return rows


def write_quote_rows(path: str | Path, rows: Iterable[QuoteRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow(r.as_record())


def group_rows(rows: Sequence[QuoteRow]) -> list[list[QuoteRow]]:
    """Rows split by ``(trade_date, index_value)``, ordered by index value."""
    groups: dict[tuple, list[QuoteRow]] = {}
    for r in rows:
        groups.setdefault((r.trade_date, r.index_value), []).append(r)
    return [groups[k] for k in sorted(groups, key=lambda k: (k[1], k[0]))]


def rows_to_quote_set(rows: Sequence[QuoteRow], label: str = "") -> QuoteSet:
    """European rows as a quote set with undiscounted prices."""
    if any(r.style != "E" for r in rows):
        raise DataError("American quotes must be converted before calibration")
    taus = sorted({r.tau for r in rows})
    fut: dict[float, float] = {}
    for r in rows:
        if not math.isclose(fut.setdefault(r.tau, r.future), r.future, rel_tol=1e-12):
            raise DataError(f"maturity {r.tau:g} on {r.trade_date} has inconsistent futures prices")
    pos = {t: m for m, t in enumerate(taus)}
    return QuoteSet(
        maturities=np.array(taus),
        futures=np.array([fut[t] for t in taus]),
        maturity_index=np.array([pos[r.tau] for r in rows]),
        strikes=np.array([r.strike for r in rows]),
        prices=np.array([r.price * math.exp(r.rate * r.tau) for r in rows]),
        index=rows[0].index_value,
        label=label or f"{rows[0].trade_date.isoformat()}@{rows[0].index_value:g}",
    )


def quote_set_rows(qs: QuoteSet, trade_date: dt.date, rate: float = 0.0, style: str = "E") -> list[QuoteRow]:
    """Rows for a quote set; prices are discounted at ``rate``."""
    out = []
    for tau, F, K, p in zip(qs.taus, qs.quote_futures, qs.strikes, qs.prices):
        out.append(QuoteRow(
            trade_date=trade_date,
            index_value=float(qs.index),
            future_maturity=trade_date + dt.timedelta(days=round(float(tau) * DAYS_PER_YEAR)),
            tau=float(tau),
            future=float(F),
            strike=float(K),
            price=float(p) * math.exp(-rate * float(tau)),
            style=style,
            rate=float(rate),
        ))
    return out


def read_quote_sets(paths: Sequence[str | Path]) -> list[QuoteSet]:
    rows = [r for p in paths for r in read_quote_rows(p)]
    return [rows_to_quote_set(g) for g in group_rows(rows)]
