"""Next-day marking of book legs through a four-level fallback hierarchy.

Levels, tried in order for option legs:

1. exact quote in the cleaned next-day chain
2. exact contract in the raw (pre-screen) next-day chain with a usable bid/ask
3. linear interpolation in strike between cleaned quotes bracketing the strike,
   same expiry and type
4. nearest cleaned quote of the same type under
   ``|K - K*| / K* + |dte - dte*| / 30``

Strict marking stops after level 2. Spot legs are marked at the next-day spot.
Each mark carries a deterministic error bound: zero for levels 1-2 and spot,
``L_K * max(K* - K-, K+ - K*)`` for interpolation, and
``L_K * |K* - K_nn| + L_E * |dte* - dte_nn|`` for the nearest neighbour.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import pandas as pd

from .books import Book, Leg, normalization_scale
from .chain import ChainSnapshot


class MarkMode(str, Enum):
    EXACT_OPTION = "exact"
    EXACT_CONTRACT = "contract"
    INTERPOLATED = "interp"
    NEAREST_NEIGHBOR = "fallback"
    SPOT_DIRECT = "spot"


class MarkPolicy(str, Enum):
    ROBUST = "robust"
    STRICT = "strict"


OPTION_MODES = (MarkMode.EXACT_OPTION, MarkMode.EXACT_CONTRACT,
                MarkMode.INTERPOLATED, MarkMode.NEAREST_NEIGHBOR)
ZERO_ERROR_MODES = (MarkMode.EXACT_OPTION, MarkMode.EXACT_CONTRACT, MarkMode.SPOT_DIRECT)
NN_DTE_SCALE = 30.0


class MarkFailed(Exception):
    def __init__(self, reason: str, leg: Leg | None = None):
        super().__init__(reason)
        self.reason = reason
        self.leg = leg


@dataclass(frozen=True)
class MarkResult:
    leg: Leg
    value: float
    mode: MarkMode
    error_bound: float | None
    detail: str = ""


@dataclass
class BookMarking:
    date: dt.date
    next_date: dt.date
    marks: list[MarkResult]
    value_t1: float
    mode_counts: dict[str, int]
    distortion_bound: float | None
    strict_ok: bool


@dataclass
class NextDay:
    """Everything the hierarchy may consult on the marking date."""

    snapshot: ChainSnapshot  # cleaned
    raw: ChainSnapshot | None = None  # prepared but unscreened
    lipschitz: tuple[float | None, float | None] | None = None

    @property
    def date(self) -> dt.date:
        return self.snapshot.date

    def lipschitz_constants(self) -> tuple[float | None, float | None]:
        if self.lipschitz is None:
            self.lipschitz = lipschitz_estimates(self.snapshot)
        return self.lipschitz


def _max_slope(f: pd.DataFrame, group_cols: list[str], x_col: str) -> float | None:
    if len(f) < 2:
        return None
    g = f.sort_values(group_cols + [x_col], kind="mergesort")
    same = np.ones(len(g) - 1, dtype=bool)
    for col in group_cols:
        v = g[col].to_numpy()
        same &= v[1:] == v[:-1]
    if not same.any():
        return None
    x = g[x_col].to_numpy(dtype=float)
    m = g["mid"].to_numpy(dtype=float)
    slopes = np.abs(np.diff(m)[same] / np.diff(x)[same])
    return float(slopes.max())


def lipschitz_estimates(snapshot: ChainSnapshot) -> tuple[float | None, float | None]:
    """Largest adjacent-strike and adjacent-expiry mid slopes in one chain.

    ``L_K`` is per index point of strike, ``L_E`` per calendar day. Either is
    ``None`` when the chain has no qualifying pair.
    """
    f = snapshot.frame
    return (
        _max_slope(f, ["expiry", "type"], "strike"),
        _max_slope(f, ["type", "strike"], "dte"),
    )


def _valid_quote(row) -> bool:
    bid, ask = row["bid"], row["ask"]
    return bool(np.isfinite(bid) and np.isfinite(ask) and bid >= 0 and ask > 0 and ask >= bid)


def mark_leg(leg: Leg, next_day: NextDay, policy: MarkPolicy = MarkPolicy.ROBUST) -> MarkResult:
    snap = next_day.snapshot
    if not leg.is_option:
        return MarkResult(leg, float(snap.market.spot), MarkMode.SPOT_DIRECT, 0.0)

    pos = snap.position(leg.expiry, leg.opt_type, leg.strike)
    if pos is not None:
        return MarkResult(leg, float(snap.frame["mid"].iat[pos]), MarkMode.EXACT_OPTION, 0.0)

    if next_day.raw is not None:
        pos = next_day.raw.position(leg.expiry, leg.opt_type, leg.strike)
        if pos is not None:
            row = next_day.raw.frame.iloc[pos]
            if _valid_quote(row):
                return MarkResult(leg, float(row["mid"]), MarkMode.EXACT_CONTRACT, 0.0)

    if MarkPolicy(policy) is MarkPolicy.STRICT:
        raise MarkFailed("no_exact_contract", leg)

    L_K, L_E = next_day.lipschitz_constants()
    f = snap.frame
    same_type = f[f["type"] == leg.opt_type]
    if same_type.empty:
        raise MarkFailed("no_same_type_quote", leg)

    smile = same_type[same_type["expiry"] == pd.Timestamp(leg.expiry)]
    ks = smile["strike"].to_numpy(dtype=float)
    below, above = ks[ks <= leg.strike], ks[ks >= leg.strike]
    if below.size and above.size:
        k_lo, k_hi = below.max(), above.min()
        mids = smile.set_index("strike")["mid"]
        m_lo, m_hi = float(mids[k_lo]), float(mids[k_hi])
        value = m_lo + (m_hi - m_lo) * (leg.strike - k_lo) / (k_hi - k_lo)
        gap = max(leg.strike - k_lo, k_hi - leg.strike)
        bound = None if L_K is None else L_K * gap
        return MarkResult(leg, value, MarkMode.INTERPOLATED, bound, f"[{k_lo:g}, {k_hi:g}]")

    target_dte = (leg.expiry - snap.date).days
    k_all = same_type["strike"].to_numpy(dtype=float)
    dte_all = same_type["dte"].to_numpy(dtype=float)
    dist = np.abs(k_all - leg.strike) / leg.strike + np.abs(dte_all - target_dte) / NN_DTE_SCALE
    best = np.lexsort((dte_all, k_all, dist))[0]
    dk, dd = abs(k_all[best] - leg.strike), abs(dte_all[best] - target_dte)
    if (dk > 0 and L_K is None) or (dd > 0 and L_E is None):
        bound = None
    else:
        bound = (L_K or 0.0) * dk + (L_E or 0.0) * dd
    nn = same_type.iloc[best]
    detail = f"{nn['expiry'].date()} {nn['type']} {nn['strike']:g}"
    return MarkResult(leg, float(nn["mid"]), MarkMode.NEAREST_NEIGHBOR, bound, detail)


def mark_book(book: Book, next_day: NextDay, policy: MarkPolicy = MarkPolicy.ROBUST) -> BookMarking:
    marks = []
    for leg in book.legs:
        try:
            marks.append(mark_leg(leg, next_day, policy))
        except MarkFailed as exc:
            raise MarkFailed(f"{exc.reason} for {leg.key}", leg) from None
    value_t1 = sum(m.leg.weight * m.value for m in marks)
    counts = {mode.value: 0 for mode in OPTION_MODES}
    for m in marks:
        if m.mode in OPTION_MODES:
            counts[m.mode.value] += 1
    bounds = [m.error_bound for m in marks]
    if any(b is None for b in bounds):
        distortion = None
    else:
        distortion = sum(abs(m.leg.weight) * m.error_bound for m in marks) / normalization_scale(book)
    strict_ok = all(m.mode in ZERO_ERROR_MODES for m in marks)
    return BookMarking(book.date, next_day.date, marks, value_t1, counts, distortion, strict_ok)


def distortion_bound(weights: Sequence[float], errors: Sequence[float], scale: float) -> float:
    """Normalized-loss distortion bound ``sum(|w| * eps) / N``."""
    return sum(abs(w) * e for w, e in zip(weights, errors)) / scale


def write_marking_audit(markings: Sequence[BookMarking], path) -> None:
    rows = []
    for bm in markings:
        for m in bm.marks:
            key = m.leg.key
            rows.append({
                "date": bm.date.isoformat(), "mark_date": bm.next_date.isoformat(),
                "leg": "spot" if key == ("spot",) else f"{key[0]} {key[1]} {key[2]:g}",
                "mode": m.mode.value, "value": m.value,
                "error_bound": "" if m.error_bound is None else m.error_bound,
                "detail": m.detail,
            })
    pd.DataFrame(rows, columns=["date", "mark_date", "leg", "mode", "value", "error_bound", "detail"]
                 ).to_csv(path, index=False, float_format="%.10g")
