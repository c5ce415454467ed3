"""One-sided sequential conformal recalibration of a reference quantile.

Residuals ``R_s = Y_{s+1} - q_ref_s`` are stored in date order. At prediction
date ``t`` the buffer is the decay-weighted upper ``(1 - alpha)`` quantile of
the most recent ``W`` residuals, with an operational fallback chain:

* weighted, once the recent window holds at least ``warm_up_min`` residuals
* unweighted quantile of the same set if the weighted one is unavailable
* the last valid buffer if that also fails, else zero
* during warm-up: unweighted quantile of every stored residual when at least
  ``total_min`` exist, else zero
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .quantiles import upper_quantile


class Regime(str, Enum):
    WEIGHTED = "weighted"
    UNWEIGHTED = "unweighted"
    STALE = "stale"
    ZERO = "zero"


class SequencingError(ValueError):
    pass


@dataclass(frozen=True)
class ConformalParams:
    lam: float = 0.99
    window: int = 250
    warm_up_min: int = 30
    total_min: int = 30

    def __post_init__(self):
        if not 0 < self.lam < 1:
            raise ValueError("lambda must lie in (0, 1)")
        if self.window < 1 or self.warm_up_min < 1 or self.total_min < 1:
            raise ValueError("window and minima must be positive")


@dataclass(frozen=True)
class BufferDecision:
    buffer: float
    regime: Regime
    n_recent: int
    n_total: int


@dataclass
class ResidualStore:
    window: int = 250
    dates: list = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    last_valid_buffer: float | None = None

    def __len__(self) -> int:
        return len(self.residuals)

    def update(self, date: dt.date, realized_y: float, q_ref: float) -> float:
        """Append ``realized_y - q_ref`` for prediction date ``date``."""
        if self.dates and date <= self.dates[-1]:
            raise SequencingError(f"residual for {date} arrives after {self.dates[-1]}")
        r = realized_y - q_ref
        self.dates.append(date)
        self.residuals.append(r)
        return r

    def available(self, t: dt.date) -> list[float]:
        """Residuals of prediction dates strictly before ``t``."""
        n = len(self.dates)
        while n and self.dates[n - 1] >= t:
            n -= 1
        return self.residuals[:n]


def decay_weights(n: int, lam: float) -> list[float]:
    """Normalized ``lam ** (t - s)``; index ``n - 1`` is the most recent (lag 1)."""
    raw = [lam ** (n - i) for i in range(n)]
    total = math.fsum(raw)
    return [r / total for r in raw]


def weighted_upper_quantile(values: Sequence[float], weights: Sequence[float], level: float) -> float:
    """``inf{z : sum(w[R <= z]) >= level}`` over the residual values.

    The weighted ECDF at each distinct value is a correctly rounded ``fsum``
    over the weights of all residuals not above it, so the result does not
    depend on summation order.
    """
    order = sorted(range(len(values)), key=values.__getitem__)
    v = [values[i] for i in order]
    w = [weights[i] for i in order]
    ends = [j + 1 for j in range(len(v)) if j + 1 == len(v) or v[j + 1] != v[j]]
    lo, hi = 0, len(ends) - 1
    if math.fsum(w) < level:
        return v[-1]
    while lo < hi:
        mid = (lo + hi) // 2
        if math.fsum(w[:ends[mid]]) >= level:
            hi = mid
        else:
            lo = mid + 1
    return v[ends[lo] - 1]


def weighted_buffer(residuals: Sequence[float], lam: float, alpha: float) -> float:
    """Decay-weighted upper ``(1 - alpha)`` quantile; ``nan`` when unavailable."""
    n = len(residuals)
    if n == 0 or not 0 < lam < 1:
        raise ValueError("need residuals and 0 < lambda < 1")
    if any(math.isnan(r) for r in residuals):
        return math.nan
    with np.errstate(all="ignore"):
        try:
            weights = decay_weights(n, lam)
        except (ZeroDivisionError, OverflowError):
            return math.nan
    if not all(math.isfinite(w) for w in weights) or math.fsum(weights) <= 0:
        return math.nan
    out = weighted_upper_quantile(list(residuals), weights, 1.0 - alpha)
    return out if math.isfinite(out) else math.nan


def unweighted_buffer(residuals: Sequence[float], alpha: float) -> float:
    if not residuals or any(math.isnan(r) for r in residuals):
        return math.nan
    out = upper_quantile(residuals, alpha)
    return out if math.isfinite(out) else math.nan


def decide_buffer(store: ResidualStore, t: dt.date, lam: float, alpha: float,
                  warm_up_min: int = 30, total_min: int = 30) -> BufferDecision:
    """Pick the operational buffer for prediction date ``t``.

    Updates ``store.last_valid_buffer`` when a weighted or unweighted buffer
    is produced.
    """
    pool = store.available(t)
    recent = pool[-store.window:]
    n_recent, n_total = len(recent), len(pool)

    def done(value, regime):
        if regime in (Regime.WEIGHTED, Regime.UNWEIGHTED):
            store.last_valid_buffer = value
        return BufferDecision(value, regime, n_recent, n_total)

    def fallback():
        if store.last_valid_buffer is not None:
            return done(store.last_valid_buffer, Regime.STALE)
        return done(0.0, Regime.ZERO)

    if n_recent >= warm_up_min:
        b = weighted_buffer(recent, lam, alpha)
        if math.isfinite(b):
            return done(b, Regime.WEIGHTED)
        b = unweighted_buffer(recent, alpha)
        if math.isfinite(b):
            return done(b, Regime.UNWEIGHTED)
        return fallback()
    if n_total >= total_min:
        b = unweighted_buffer(pool, alpha)
        if math.isfinite(b):
            return done(b, Regime.UNWEIGHTED)
        return fallback()
    return done(0.0, Regime.ZERO)


def reported_threshold(q_ref: float, buffer: float, floor: float | None) -> tuple[float, float]:
    """Return ``(q_core, q_rep)`` with ``q_core = q_ref + buffer`` and ``q_rep = max(q_core, floor)``."""
    core = q_ref + buffer
    return core, (core if floor is None else max(core, floor))


class ConformalCalibrator:
    """Residual store plus parameters; owned by a single sequential loop."""

    def __init__(self, params: ConformalParams = ConformalParams(), alpha: float = 0.10):
        self.params = params
        self.alpha = alpha
        self.store = ResidualStore(window=params.window)

    def decide(self, t: dt.date) -> BufferDecision:
        p = self.params
        return decide_buffer(self.store, t, p.lam, self.alpha, p.warm_up_min, p.total_min)

    def update(self, t: dt.date, realized_y: float, q_ref: float) -> float:
        return self.store.update(t, realized_y, q_ref)
