"""Small hand-built chains shared by the unit tests."""

from __future__ import annotations

import datetime as dt

import pandas as pd

from bookvar.chain import CHAIN_COLUMNS, MarketDay, ZeroCurve

D0 = dt.date(2021, 3, 1)


def market(date=D0, spot=4000.0, rate=0.0, div=0.0, vix=20.0, vxv=22.0) -> MarketDay:
    return MarketDay(date, spot, ZeroCurve.flat(rate), div, vix, vxv)


def quote(expiry, strike, opt_type, bid, ask, iv=0.2, delta=None, oi=100.0, volume=10.0, date=D0):
    if delta is None:
        delta = 0.5 if opt_type == "C" else -0.5
    return {
        "trade_date": pd.Timestamp(date), "expiry": pd.Timestamp(expiry), "strike": float(strike),
        "type": opt_type, "bid": float(bid), "ask": float(ask), "iv": iv, "delta": delta,
        "open_interest": oi, "volume": volume,
    }


def frame(rows) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=CHAIN_COLUMNS)


def days(n: int) -> dt.timedelta:
    return dt.timedelta(days=n)
