"""Seeded synthetic option market with known next-day prices.

Spot follows a two-regime lognormal walk (Student-t shocks optional). Each
listed contract gets ``iv = level_t + skew_regime * k`` where ``level_t`` is the
regime volatility plus a premium and a mean-reverting perturbation. Mids come
from Black-Scholes, bid/ask straddle the mid by a fixed fraction, and deltas
are analytic. Contracts can be deleted at random from a day's chain; the
oracle still prices them, which gives ground truth for marking tests.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .chain import CALL, CHAIN_COLUMNS, PUT, MarketDay, ZeroCurve
from .pricing import bs_delta, bs_price

CALM, STRESSED = 0, 1


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 7
    n_days: int = Field(750, ge=2)
    start_date: dt.date = dt.date(2018, 1, 2)
    spot0: float = Field(4000.0, gt=0)
    rate: float = 0.02
    div_yield: float = 0.015
    calm_vol: float = Field(0.12, gt=0)
    stressed_vol: float = Field(0.32, gt=0)
    p_calm_to_stressed: float = Field(0.012, ge=0, le=1)
    p_stressed_to_calm: float = Field(0.04, ge=0, le=1)
    return_vol_scale: float = Field(1.0, ge=0)
    tail_df: float | None = Field(4.0, gt=2)
    iv_premium: float = Field(0.02, ge=0)
    iv_noise: float = Field(0.008, ge=0)
    iv_noise_persistence: float = Field(0.9, ge=0, lt=1)
    calm_skew: float = -0.6
    stressed_skew: float = -1.2
    min_iv: float = Field(0.04, gt=0)
    strike_step: float = Field(25.0, gt=0)
    k_band: tuple[float, float] = (-0.24, 0.12)
    weekly_max_dte: int = Field(63, ge=1)
    max_dte: int = Field(130, ge=1)
    spread_frac: float = Field(0.04, ge=0, lt=2)
    missing_prob: float = Field(0.0, ge=0, le=1)
    crisis_start: dt.date | None = dt.date(2020, 2, 20)
    crisis_end: dt.date | None = dt.date(2020, 4, 15)

    @model_validator(mode="after")
    def _check(self):
        if self.k_band[0] >= self.k_band[1]:
            raise ValueError("k_band must be increasing")
        if (self.crisis_start is None) != (self.crisis_end is None):
            raise ValueError("crisis window needs both ends or neither")
        if self.max_dte < self.weekly_max_dte:
            raise ValueError("max_dte must be >= weekly_max_dte")
        return self


@dataclass(frozen=True)
class DayState:
    date: dt.date
    spot: float
    iv_level: float
    skew: float
    regime: int


@dataclass
class SyntheticMarket:
    config: SynthConfig
    states: list[DayState]
    markets: list[MarketDay]
    raw_chains: list[pd.DataFrame]

    @property
    def dates(self) -> list[dt.date]:
        return [s.date for s in self.states]

    def oracle_mid(self, day: int, expiry: dt.date, opt_type: str, strike):
        """Mid that would be quoted on ``day``, whether or not the contract was listed."""
        mid = _price(self.config, self.states[day], expiry, opt_type, strike)[0]
        bid, ask = _quote_sides(mid, self.config.spread_frac)
        return (bid + ask) / 2.0

    def full_chain(self) -> pd.DataFrame:
        return pd.concat(self.raw_chains, ignore_index=True)


def _price(cfg: SynthConfig, st: DayState, expiry, opt_type, strike):
    dte = (np.asarray(expiry, dtype="datetime64[D]") - np.datetime64(st.date, "D")).astype(int)
    tau = dte / 365.0
    strike = np.asarray(strike, dtype=float)
    fwd = st.spot * np.exp((cfg.rate - cfg.div_yield) * tau)
    k = np.log(strike / fwd)
    iv = np.maximum(st.iv_level + st.skew * k, cfg.min_iv)
    is_call = np.asarray(opt_type) == CALL
    mid = bs_price(fwd, strike, tau, iv, np.exp(-cfg.rate * tau), is_call)
    delta = bs_delta(fwd, strike, tau, iv, np.exp(-cfg.div_yield * tau), is_call)
    return mid, iv, delta, dte


def _quote_sides(mid, spread_frac):
    half = 0.5 * spread_frac * mid
    return np.maximum(mid - half, 0.0), mid + half


def listed_expiries(date: dt.date, weekly_max_dte: int, max_dte: int) -> list[dt.date]:
    """Fridays up to ``weekly_max_dte`` days out, then third Fridays up to ``max_dte``."""
    out = []
    d = date + dt.timedelta(days=(4 - date.weekday()) % 7 or 7)
    while (d - date).days <= max_dte:
        dte = (d - date).days
        if dte <= weekly_max_dte or 15 <= d.day <= 21:
            out.append(d)
        d += dt.timedelta(days=7)
    return out


def _regimes(cfg: SynthConfig, dates, rng) -> np.ndarray:
    reg = np.empty(len(dates), dtype=int)
    state = CALM
    u = rng.random(len(dates))
    for i, d in enumerate(dates):
        if i:
            p = cfg.p_calm_to_stressed if state == CALM else cfg.p_stressed_to_calm
            if u[i] < p:
                state = 1 - state
        in_crisis = cfg.crisis_start is not None and cfg.crisis_start <= d <= cfg.crisis_end
        reg[i] = STRESSED if in_crisis else state
    return reg


def generate(cfg: SynthConfig) -> SyntheticMarket:
    rng = np.random.default_rng(cfg.seed)
    dates = [d.date() for d in pd.bdate_range(cfg.start_date, periods=cfg.n_days)]
    regime = _regimes(cfg, dates, rng)
    vol = np.where(regime == STRESSED, cfg.stressed_vol, cfg.calm_vol)
    skew = np.where(regime == STRESSED, cfg.stressed_skew, cfg.calm_skew)

    if cfg.tail_df is None:
        shocks = rng.standard_normal(cfg.n_days)
    else:
        shocks = rng.standard_t(cfg.tail_df, cfg.n_days) * np.sqrt((cfg.tail_df - 2) / cfg.tail_df)
    sig = vol * cfg.return_vol_scale
    dt_year = 1.0 / 252.0
    log_ret = (cfg.rate - cfg.div_yield - 0.5 * sig**2) * dt_year + sig * np.sqrt(dt_year) * shocks
    if cfg.return_vol_scale == 0:
        log_ret[:] = 0.0
    log_ret[0] = 0.0
    spot = cfg.spot0 * np.exp(np.cumsum(log_ret))

    noise = np.zeros(cfg.n_days)
    eta = rng.standard_normal(cfg.n_days)
    for i in range(1, cfg.n_days):
        noise[i] = cfg.iv_noise_persistence * noise[i - 1] + cfg.iv_noise * eta[i]
    iv_level = np.maximum(vol + cfg.iv_premium + noise, cfg.min_iv)
    long_run = 0.5 * (cfg.calm_vol + cfg.stressed_vol) + cfg.iv_premium

    curve = ZeroCurve((30.0, 365.0), (cfg.rate, cfg.rate))
    states, markets, chains = [], [], []
    for i, d in enumerate(dates):
        st = DayState(d, float(spot[i]), float(iv_level[i]), float(skew[i]), int(regime[i]))
        states.append(st)
        markets.append(MarketDay(
            d, st.spot, curve, cfg.div_yield,
            vix=100.0 * st.iv_level, vxv=100.0 * (0.5 * st.iv_level + 0.5 * long_run),
        ))
        chains.append(_chain_for_day(cfg, st, rng))
    return SyntheticMarket(cfg, states, markets, chains)


def _chain_for_day(cfg: SynthConfig, st: DayState, rng) -> pd.DataFrame:
    expiries = listed_expiries(st.date, cfg.weekly_max_dte, cfg.max_dte)
    lo = np.ceil(st.spot * np.exp(cfg.k_band[0]) / cfg.strike_step)
    hi = np.floor(st.spot * np.exp(cfg.k_band[1]) / cfg.strike_step)
    strikes = np.arange(lo, hi + 1) * cfg.strike_step
    exp_grid, k_grid, t_grid = np.meshgrid(
        np.array(expiries, dtype="datetime64[D]"), strikes, np.array([CALL, PUT]), indexing="ij"
    )
    exp_v, k_v, t_v = exp_grid.ravel(), k_grid.ravel(), t_grid.ravel()
    mid, iv, delta, dte = _price(cfg, st, exp_v, t_v, k_v)
    bid, ask = _quote_sides(mid, cfg.spread_frac)
    n = len(mid)
    moneyness = np.abs(np.log(k_v / st.spot))
    oi = rng.poisson(400.0 * np.exp(-8.0 * moneyness) + 5.0, n)
    volume = rng.poisson(60.0 * np.exp(-10.0 * moneyness) + 1.0, n)
    frame = pd.DataFrame({
        "trade_date": pd.Timestamp(st.date),
        "expiry": pd.to_datetime(exp_v),
        "strike": k_v,
        "type": t_v.astype(str),
        "bid": bid,
        "ask": ask,
        "iv": iv,
        "delta": delta,
        "open_interest": oi.astype(float),
        "volume": volume.astype(float),
    })
    keep = rng.random(n) >= cfg.missing_prob
    return frame.loc[keep, CHAIN_COLUMNS].reset_index(drop=True)
