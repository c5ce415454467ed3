"""Per-date market state vector built from the cleaned chain and market series."""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from .chain import CALL, PUT, ChainSnapshot, MarketDay, nearest_abs_delta, nearest_expiry

SURFACE_FIELDS = (
    "atm_iv", "skew_25d", "term_slope", "smile_curvature",
    "avg_oi", "avg_volume", "avg_rel_spread",
)
MARKET_FIELDS = (
    "spot_ret_1d", "abs_ret_1d", "realized_vol_21d", "drawdown",
    "downside_semivar_21d", "vix", "vxv", "vix_vxv_spread",
)
CHANGE_BASES = ("atm_iv", "skew_25d", "vix")
CHANGE_FIELDS = tuple(f"{b}_chg_{h}d" for b in CHANGE_BASES for h in (1, 5))
STATE_FIELDS = SURFACE_FIELDS + MARKET_FIELDS + CHANGE_FIELDS

NAN = float("nan")


@dataclass(frozen=True)
class FeatureConfig:
    near_dte: int = 30
    far_dte: int = 90
    wing_delta: float = 0.25
    rv_window: int = 21
    drawdown_window: int = 252


@dataclass
class StateVector:
    date: dt.date
    values: dict[str, float] = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    def as_dict(self) -> dict[str, float]:
        return {name: self.values.get(name, NAN) for name in STATE_FIELDS}


def _atm_iv(bucket: pd.DataFrame) -> float:
    if bucket.empty:
        return NAN
    absk = bucket["k"].abs().to_numpy()
    order = np.lexsort((bucket["strike"].to_numpy(), absk))
    strike = bucket["strike"].iloc[order[0]]
    return float(bucket.loc[bucket["strike"] == strike, "iv"].mean())


def surface_stats(snapshot: ChainSnapshot, cfg: FeatureConfig = FeatureConfig()) -> dict[str, float]:
    """Surface level/shape and chain-quality summaries for one cleaned chain."""
    f = snapshot.frame
    out = dict.fromkeys(SURFACE_FIELDS, NAN)
    if f.empty:
        return out
    near_exp = nearest_expiry(f, cfg.near_dte)
    far_exp = nearest_expiry(f, cfg.far_dte)
    near = f[f["expiry"] == near_exp]
    atm = _atm_iv(near)
    out["atm_iv"] = atm
    put_i = nearest_abs_delta(near, PUT, cfg.wing_delta)
    call_i = nearest_abs_delta(near, CALL, cfg.wing_delta)
    if put_i is not None and call_i is not None:
        iv_p, iv_c = float(f.at[put_i, "iv"]), float(f.at[call_i, "iv"])
        out["skew_25d"] = iv_p - iv_c
        out["smile_curvature"] = 0.5 * (iv_p + iv_c) - atm
    out["term_slope"] = _atm_iv(f[f["expiry"] == far_exp]) - atm
    out["avg_oi"] = float(f["open_interest"].mean())
    out["avg_volume"] = float(f["volume"].mean())
    out["avg_rel_spread"] = float(((f["ask"] - f["bid"]) / f["mid"]).mean())
    return out


def market_stats(markets: Sequence[MarketDay], cfg: FeatureConfig = FeatureConfig()) -> dict[str, float]:
    """Return/volatility/drawdown fields for the last entry of ``markets``."""
    today = markets[-1]
    out = dict.fromkeys(MARKET_FIELDS, NAN)
    out["vix"], out["vxv"] = float(today.vix), float(today.vxv)
    out["vix_vxv_spread"] = out["vix"] - out["vxv"]
    spots = np.array([m.spot for m in markets[-(max(cfg.rv_window, cfg.drawdown_window) + 1):]])
    out["drawdown"] = float(spots[-1] / spots[-cfg.drawdown_window:].max() - 1.0)
    if len(spots) >= 2:
        rets = np.diff(np.log(spots))[-cfg.rv_window:]
        out["spot_ret_1d"] = float(rets[-1])
        out["abs_ret_1d"] = abs(out["spot_ret_1d"])
        out["realized_vol_21d"] = math.sqrt(252.0 * float(np.mean(rets**2)))
        out["downside_semivar_21d"] = float(np.mean(np.minimum(rets, 0.0) ** 2))
    return out


class StateBuilder:
    """Incremental builder; push dates in order and get each date's state back.

    Only data pushed so far is ever read, so each state is causal by construction.
    """

    def __init__(self, cfg: FeatureConfig = FeatureConfig()):
        self.cfg = cfg
        self._markets: list[MarketDay] = []
        self._levels: list[dict[str, float]] = []

    def push(self, snapshot: ChainSnapshot, market: MarketDay) -> StateVector:
        if self._markets and market.date <= self._markets[-1].date:
            raise ValueError(f"dates must increase: {market.date} after {self._markets[-1].date}")
        self._markets.append(market)
        keep = max(self.cfg.rv_window, self.cfg.drawdown_window) + 1
        del self._markets[:-keep]
        values = surface_stats(snapshot, self.cfg)
        values.update(market_stats(self._markets, self.cfg))
        self._levels.append({b: values[b] for b in CHANGE_BASES})
        del self._levels[:-6]
        for base in CHANGE_BASES:
            for h in (1, 5):
                prev = self._levels[-1 - h][base] if len(self._levels) > h else NAN
                values[f"{base}_chg_{h}d"] = values[base] - prev
        return StateVector(market.date, values)


def build_state(snapshots: Sequence[ChainSnapshot], markets: Sequence[MarketDay],
                cfg: FeatureConfig = FeatureConfig()) -> StateVector:
    """State at the last date of the supplied history."""
    if len(snapshots) != len(markets) or not markets:
        raise ValueError("need one snapshot per market day and at least one day")
    builder = StateBuilder(cfg)
    n_keep = max(cfg.rv_window, cfg.drawdown_window) + 1
    start = max(0, len(markets) - n_keep)
    # surface stats are only needed for the last 6 dates; earlier ones feed market fields
    for i in range(start, len(markets)):
        snap = snapshots[i]
        if i < len(markets) - 6:
            snap = ChainSnapshot(snap.date, snap.frame.iloc[0:0], snap.market)
        state = builder.push(snap, markets[i])
    return state


def write_features_csv(states: Sequence[StateVector], path) -> None:
    rows = [{"date": s.date.isoformat(), **s.as_dict()} for s in states]
    pd.DataFrame(rows, columns=["date", *STATE_FIELDS]).to_csv(path, index=False, float_format="%.10g")
