"""Standardized option books formed from one cleaned chain.

Three fixed-rule books at the expiry nearest 30 calendar days:

* ``atm_straddle``: long call + long put at the strike nearest the forward
* ``rr25``: long ~25-delta call, short ~25-delta put
* ``sps25_10``: short ~25-delta put, long ~10-delta put

If the option-only delta exceeds ``delta_tolerance`` in absolute value a spot
leg neutralising it is appended. Spot carries delta 1 per unit and no vega.
"""

from __future__ import annotations

import datetime as dt
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Sequence

import numpy as np
import pandas as pd

from .chain import CALL, PUT, ChainSnapshot, nearest_abs_delta, nearest_expiry
from .pricing import bs_vega

TARGET_DTE = 30
DELTA_TOLERANCE = 0.05

DESCRIPTOR_FIELDS = (
    "premium_gross", "net_premium", "gross_vega", "gross_spot_notional",
    "pre_hedge_delta", "post_hedge_delta", "avg_dte", "avg_abs_k",
)


class BookType(str, Enum):
    ATM_STRADDLE = "atm_straddle"
    RISK_REVERSAL_25 = "rr25"
    SHORT_PUT_SPREAD_25_10 = "sps25_10"


class BookNotFormable(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


@dataclass(frozen=True)
class Leg:
    kind: str  # "option" or "spot"
    weight: float
    entry_mark: float
    expiry: dt.date | None = None
    strike: float | None = None
    opt_type: str | None = None
    delta: float = 1.0
    vega: float = 0.0
    dte: int | None = None
    k: float | None = None

    def __post_init__(self):
        if self.weight == 0:
            raise ValueError("leg weight must be non-zero")

    @property
    def is_option(self) -> bool:
        return self.kind == "option"

    @property
    def key(self) -> tuple:
        return (self.expiry, self.opt_type, self.strike) if self.is_option else ("spot",)


@dataclass(frozen=True)
class Book:
    date: dt.date
    book_type: BookType
    legs: tuple[Leg, ...]
    value_t: float
    premium_gross: float
    descriptors: dict[str, float] = field(default_factory=dict, compare=True, hash=False)

    @property
    def option_legs(self) -> list[Leg]:
        return [leg for leg in self.legs if leg.is_option]

    @property
    def hedge_leg(self) -> Leg | None:
        return next((leg for leg in self.legs if not leg.is_option), None)


def select_expiry(snapshot: ChainSnapshot, target_dte: int = TARGET_DTE) -> dt.date:
    exp = nearest_expiry(snapshot.frame, target_dte)
    if exp is None:
        raise BookNotFormable("empty_chain", str(snapshot.date))
    return exp.date()


def _option_leg(snapshot: ChainSnapshot, label, weight: float) -> Leg:
    r = snapshot.frame.loc[label]
    discount = float(np.exp(-snapshot.market.zero_rate(r["tau"]) * r["tau"]))
    vega = float(bs_vega(r["forward"], r["strike"], r["tau"], r["iv"], discount))
    return Leg(
        kind="option", weight=weight, entry_mark=float(r["mid"]),
        expiry=r["expiry"].date(), strike=float(r["strike"]), opt_type=r["type"],
        delta=float(r["delta"]), vega=vega, dte=int(r["dte"]), k=float(r["k"]),
    )


def _straddle(snapshot: ChainSnapshot, bucket: pd.DataFrame) -> list[Leg]:
    ok = bucket[bucket["delta"].notna()]
    calls = ok[ok["type"] == CALL].set_index("strike")
    puts = ok[ok["type"] == PUT].set_index("strike")
    both = calls.index.intersection(puts.index)
    if both.empty:
        raise BookNotFormable("no_straddle_pair", str(snapshot.date))
    strikes = both.to_numpy(dtype=float)
    forward = float(calls.loc[both[0], "forward"])
    order = np.lexsort((strikes, np.abs(strikes - forward)))
    strike = strikes[order[0]]
    call_label = ok.index[(ok["type"] == CALL) & (ok["strike"] == strike)][0]
    put_label = ok.index[(ok["type"] == PUT) & (ok["strike"] == strike)][0]
    return [_option_leg(snapshot, call_label, 1.0), _option_leg(snapshot, put_label, 1.0)]


def _by_delta(snapshot, bucket, opt_type, target, weight, reason) -> Leg:
    label = nearest_abs_delta(bucket, opt_type, target)
    if label is None:
        raise BookNotFormable(reason, f"{snapshot.date} target |delta|={target}")
    return _option_leg(snapshot, label, weight)


def form_book(snapshot: ChainSnapshot, book_type: BookType | str,
              delta_tolerance: float = DELTA_TOLERANCE, target_dte: int = TARGET_DTE) -> Book:
    book_type = BookType(book_type)
    expiry = select_expiry(snapshot, target_dte)
    f = snapshot.frame
    bucket = f[f["expiry"] == pd.Timestamp(expiry)]

    if book_type is BookType.ATM_STRADDLE:
        legs = _straddle(snapshot, bucket)
    elif book_type is BookType.RISK_REVERSAL_25:
        legs = [
            _by_delta(snapshot, bucket, CALL, 0.25, 1.0, "no_call_candidate"),
            _by_delta(snapshot, bucket, PUT, 0.25, -1.0, "no_put_candidate"),
        ]
    else:
        legs = [
            _by_delta(snapshot, bucket, PUT, 0.25, -1.0, "no_put_candidate"),
            _by_delta(snapshot, bucket, PUT, 0.10, 1.0, "no_put_candidate"),
        ]
        if legs[0].strike == legs[1].strike:
            raise BookNotFormable("degenerate_spread", f"{snapshot.date} strike {legs[0].strike}")

    pre_delta = sum(leg.weight * leg.delta for leg in legs)
    spot = snapshot.market.spot
    if abs(pre_delta) > delta_tolerance:
        legs.append(Leg(kind="spot", weight=-pre_delta, entry_mark=spot))
    return _assemble(snapshot.date, book_type, legs, pre_delta, spot)


def _assemble(date, book_type, legs: list[Leg], pre_delta: float, spot: float) -> Book:
    options = [leg for leg in legs if leg.is_option]
    hedge = [leg for leg in legs if not leg.is_option]
    value_t = sum(leg.weight * leg.entry_mark for leg in legs)
    gross = sum(abs(leg.weight) * leg.entry_mark for leg in options)
    desc = {
        "premium_gross": gross,
        "net_premium": sum(leg.weight * leg.entry_mark for leg in options),
        "gross_vega": sum(abs(leg.weight) * leg.vega for leg in options),
        "gross_spot_notional": sum(abs(leg.weight) * spot for leg in hedge),
        "pre_hedge_delta": pre_delta,
        "post_hedge_delta": pre_delta + sum(leg.weight for leg in hedge),
        "avg_dte": float(np.mean([leg.dte for leg in options])),
        "avg_abs_k": float(np.mean([abs(leg.k) for leg in options])),
    }
    return Book(date, book_type, tuple(legs), value_t, gross, desc)


def normalization_scale(book: Book) -> float:
    """Gross option premium: sum of |weight| * entry mark over option legs."""
    scale = sum(abs(leg.weight) * leg.entry_mark for leg in book.option_legs)
    if not scale > 0:
        raise RuntimeError(f"{book.date} {book.book_type.value}: non-positive premium {scale}")
    return scale


def write_books_csv(books: Sequence[Book], legs_path, descriptors_path) -> None:
    leg_rows, desc_rows = [], []
    for b in books:
        for i, leg in enumerate(b.legs):
            leg_rows.append({
                "date": b.date.isoformat(), "book_type": b.book_type.value, "leg": i,
                "kind": leg.kind, "expiry": leg.expiry.isoformat() if leg.expiry else "",
                "type": leg.opt_type or "", "strike": leg.strike, "weight": leg.weight,
                "entry_mark": leg.entry_mark, "delta": leg.delta,
            })
        desc_rows.append({"date": b.date.isoformat(), "book_type": b.book_type.value,
                          "value_t": b.value_t, **b.descriptors})
    pd.DataFrame(leg_rows).to_csv(legs_path, index=False, float_format="%.10g")
    pd.DataFrame(desc_rows).to_csv(descriptors_path, index=False, float_format="%.10g")


# ------------------------------------------------------------------------
# Joint laws with equal marginals but different book-loss quantiles.


def upper_quantile_discrete(law: dict, alpha) -> object:
    """Smallest support point v with P(Y <= v) >= 1 - alpha for a finite law."""
    acc = 0
    for value in sorted(law):
        acc += law[value]
        if acc >= 1 - alpha:
            return value
    return max(law)


def two_point_joint_laws(c, betas: Sequence, j: int, k: int):
    """Rademacher construction on legs ``j`` and ``k`` of ``Y = c - sum(beta * Z)``.

    Law A sets ``Z_j = Z_k = xi``; law B sets ``Z_j = -Z_k = xi``. Returns the
    per-leg marginals and loss law under each, all as exact ``Fraction`` weights.
    """
    if j == k or betas[j] == 0 or betas[k] == 0:
        raise ValueError("need two distinct legs with non-zero coefficients")
    half = Fraction(1, 2)
    out = {}
    for name, sign in (("A", 1), ("B", -1)):
        outcomes = []
        for xi in (1, -1):
            z = [0] * len(betas)
            z[j], z[k] = xi, sign * xi
            outcomes.append((tuple(z), half))
        marginals = []
        for r in range(len(betas)):
            m = Counter()
            for z, p in outcomes:
                m[z[r]] += p
            marginals.append(dict(m))
        loss = Counter()
        for z, p in outcomes:
            loss[c - sum(b * zr for b, zr in zip(betas, z))] += p
        out[name] = {"marginals": marginals, "loss": dict(loss)}
    return out["A"], out["B"]
