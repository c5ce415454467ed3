"""Book-level supervised panel: next-day normalized loss plus date-t predictors."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import pandas as pd

from .books import DESCRIPTOR_FIELDS, Book, normalization_scale
from .features import STATE_FIELDS, StateVector
from .marking import OPTION_MODES, BookMarking
from .quantiles import upper_quantile

MODE_FIELDS = tuple(f"prev_n_{m.value}" for m in OPTION_MODES)
NAN = float("nan")


@dataclass(frozen=True)
class LagConfig:
    short: int = 1
    mean_window: int = 21
    quantile_window: int = 63
    quantile_level: float = 0.90


LAG_FIELDS = ("y_lag1", "y_mean_21", "y_q90_63")
FEATURE_NAMES = STATE_FIELDS + DESCRIPTOR_FIELDS + MODE_FIELDS + LAG_FIELDS


@dataclass
class PanelRow:
    date: dt.date
    next_date: dt.date
    book_type: str
    y_next: float
    x: dict[str, float]
    value_t: float
    value_t1: float
    scale: float
    distortion_bound: float | None
    strict_ok: bool
    mode_counts: dict[str, int] = field(default_factory=dict)

    def x_vector(self, names=FEATURE_NAMES) -> np.ndarray:
        return np.array([self.x.get(n, NAN) for n in names], dtype=float)


def compute_loss(book: Book, marking: BookMarking) -> float:
    """Normalized next-day loss ``(V_t - V_{t+1}) / N_t``; losses are positive."""
    return (book.value_t - marking.value_t1) / normalization_scale(book)


def build_panel(books: Mapping[dt.date, Book], markings: Mapping[dt.date, BookMarking],
                states: Mapping[dt.date, StateVector], lags: LagConfig = LagConfig()) -> list[PanelRow]:
    """One row per date whose book was formed and marked; ordered by date.

    Lagged loss summaries and the previous marking's mode counts only use rows
    at earlier dates, whose losses were realized by the current close.
    """
    rows: list[PanelRow] = []
    ys: list[float] = []
    prev_counts: dict[str, int] | None = None
    for date in sorted(set(books) & set(markings)):
        book, marking = books[date], markings[date]
        state = states.get(date)
        x = dict(state.as_dict()) if state is not None else dict.fromkeys(STATE_FIELDS, NAN)
        x.update({k: float(book.descriptors[k]) for k in DESCRIPTOR_FIELDS})
        for m, name in zip(OPTION_MODES, MODE_FIELDS):
            x[name] = NAN if prev_counts is None else float(prev_counts[m.value])
        if ys:
            x["y_lag1"] = ys[-1]
            x["y_mean_21"] = float(np.mean(ys[-lags.mean_window:]))
            x["y_q90_63"] = upper_quantile(ys[-lags.quantile_window:], 1.0 - lags.quantile_level)
        else:
            x.update(dict.fromkeys(LAG_FIELDS, NAN))
        y = compute_loss(book, marking)
        rows.append(PanelRow(
            date=date, next_date=marking.next_date, book_type=book.book_type.value,
            y_next=y, x=x, value_t=book.value_t, value_t1=marking.value_t1,
            scale=normalization_scale(book), distortion_bound=marking.distortion_bound,
            strict_ok=marking.strict_ok, mode_counts=dict(marking.mode_counts),
        ))
        ys.append(y)
        prev_counts = marking.mode_counts
    return rows


PANEL_META = ["date", "next_date", "book_type", "y_next", "value_t", "value_t1",
              "scale", "distortion_bound", "strict_ok"]


def panel_frame(rows: list[PanelRow]) -> pd.DataFrame:
    data = [{
        "date": r.date.isoformat(), "next_date": r.next_date.isoformat(),
        "book_type": r.book_type, "y_next": r.y_next, "value_t": r.value_t,
        "value_t1": r.value_t1, "scale": r.scale,
        "distortion_bound": np.nan if r.distortion_bound is None else r.distortion_bound,
        "strict_ok": int(r.strict_ok), **{n: r.x.get(n, NAN) for n in FEATURE_NAMES},
    } for r in rows]
    return pd.DataFrame(data, columns=PANEL_META + list(FEATURE_NAMES))


def write_panel_csv(rows: list[PanelRow], path) -> None:
    panel_frame(rows).to_csv(path, index=False, float_format="%.17g")
