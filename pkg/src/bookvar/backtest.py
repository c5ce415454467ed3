"""Sequential forecast loop, exceedance metrics and report tables."""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .books import BookNotFormable, BookType, form_book
from .chain import ChainSnapshot, FilterDiagnostics, MarketDay, prepare_chain, screen_chain
from .conformal import ConformalCalibrator, ConformalParams
from .features import FeatureConfig, StateBuilder
from .forecaster import FitFailed, TrainWindowConfig, apply_floor, fit_quantile, historical_benchmark, predict
from .marking import MarkFailed, MarkPolicy, NextDay, mark_book
from .panel import FEATURE_NAMES, LagConfig, PanelRow, build_panel

log = logging.getLogger(__name__)

CRISIS_START = dt.date(2020, 2, 20)
CRISIS_END = dt.date(2020, 4, 15)
DESCRIPTIVE_N = 50

# method name -> ForecastRecord field holding its threshold
METHODS = {"hist": "q_hist", "raw_base": "q_base", "base": "q_ref", "conformal": "q_rep"}
MODE_COLUMNS = ("n_exact", "n_contract", "n_interp", "n_fallback")


@dataclass(frozen=True)
class BacktestConfig:
    train: TrainWindowConfig = field(default_factory=TrainWindowConfig)
    conformal: ConformalParams = field(default_factory=ConformalParams)
    rolling_window: int = 50
    crisis_start: dt.date = CRISIS_START
    crisis_end: dt.date = CRISIS_END

    @property
    def alpha(self) -> float:
        return self.train.alpha


@dataclass(frozen=True)
class ForecastRecord:
    date: dt.date
    next_date: dt.date
    y_next: float
    q_base: float
    q_hist: float
    q_ref: float
    buffer: float
    regime: str
    n_recent: int
    n_total: int
    q_core: float
    q_rep: float
    model_id: int
    n_exact: int
    n_contract: int
    n_interp: int
    n_fallback: int
    strict_ok: bool
    distortion_bound: float

    def threshold(self, method: str) -> float:
        return getattr(self, METHODS[method])

    def exceeded(self, method: str) -> bool:
        return self.y_next > self.threshold(method)

    def violation(self, method: str) -> float:
        return max(self.y_next - self.threshold(method), 0.0)


class AlignmentError(ValueError):
    pass


# ---------------------------------------------------------------- loop

def run_backtest(panel: Sequence[PanelRow], cfg: BacktestConfig = BacktestConfig()) -> list[ForecastRecord]:
    """Strictly causal forecast loop over a date-ordered panel.

    At row ``i`` only rows ``< i`` (whose losses are realized by the current
    close) feed training, the historical benchmark and the residual store.
    """
    tc = cfg.train
    dates = [r.date for r in panel]
    if any(b <= a for a, b in zip(dates, dates[1:])):
        raise ValueError("panel dates must be strictly increasing")
    X = np.array([r.x_vector() for r in panel]).reshape(len(panel), len(FEATURE_NAMES))
    y = np.array([r.y_next for r in panel], dtype=float)
    cal = ConformalCalibrator(cfg.conformal, tc.alpha)
    model, model_id, since_fit = None, -1, 0
    out: list[ForecastRecord] = []
    for i, row in enumerate(panel):
        lo = max(0, i - tc.window)
        if i - lo < tc.min_train_rows:
            continue
        if model is None or since_fit >= tc.retrain_every:
            try:
                model = fit_quantile(X[lo:i], y[lo:i], tc.alpha, tc)
                model_id += 1
            except FitFailed as exc:
                log.warning("%s: fit failed (%s); keeping previous model", row.date, exc)
            since_fit = 0
            if model is None:
                continue
        since_fit += 1
        q_base = predict(model, X[i])
        q_hist = historical_benchmark(y[lo:i], tc.alpha)
        q_ref = apply_floor(q_base, tc.floor)
        decision = cal.decide(row.date)
        q_core = q_ref + decision.buffer
        q_rep = apply_floor(q_core, tc.floor)
        mc = row.mode_counts
        out.append(ForecastRecord(
            date=row.date, next_date=row.next_date, y_next=row.y_next,
            q_base=q_base, q_hist=q_hist, q_ref=q_ref, buffer=decision.buffer,
            regime=decision.regime.value, n_recent=decision.n_recent, n_total=decision.n_total,
            q_core=q_core, q_rep=q_rep, model_id=model_id,
            n_exact=mc.get("exact", 0), n_contract=mc.get("contract", 0),
            n_interp=mc.get("interp", 0), n_fallback=mc.get("fallback", 0),
            strict_ok=row.strict_ok,
            distortion_bound=math.nan if row.distortion_bound is None else row.distortion_bound,
        ))
        cal.update(row.date, row.y_next, q_ref)
    return out


# ---------------------------------------------------------------- pipeline

@dataclass
class DayData:
    date: dt.date
    market: MarketDay
    snapshot: ChainSnapshot
    raw: ChainSnapshot
    diagnostics: FilterDiagnostics
    state: object


def prepare_days(raw_by_date: Mapping[dt.date, pd.DataFrame], markets: Mapping[dt.date, MarketDay],
                 features: FeatureConfig = FeatureConfig()) -> list[DayData]:
    """Clean every date once and build the causal state vectors."""
    builder = StateBuilder(features)
    days = []
    for date in sorted(set(raw_by_date) & set(markets)):
        raw, market = raw_by_date[date], markets[date]
        prepared = prepare_chain(raw, market)
        snap, diag = screen_chain(prepared, len(raw))
        days.append(DayData(date, market, snap, prepared, diag,
                            builder.push(snap, market)))
    return days


def build_book_panel(days: Sequence[DayData], book_type: BookType | str,
                     policy: MarkPolicy = MarkPolicy.ROBUST,
                     lags: LagConfig = LagConfig(), skips: Counter | None = None,
                     next_days: list[NextDay] | None = None) -> list[PanelRow]:
    """Form the book at each date and mark it on the following data date."""
    if next_days is None:
        next_days = [NextDay(d.snapshot, d.raw) for d in days]
    books, marks, states = {}, {}, {}
    for i, day in enumerate(days[:-1]):
        try:
            book = form_book(day.snapshot, book_type)
        except BookNotFormable as exc:
            _skip(skips, f"book:{exc.reason}", day.date)
            continue
        try:
            marking = mark_book(book, next_days[i + 1], policy)
        except MarkFailed as exc:
            _skip(skips, f"mark:{exc.reason.split(' for ')[0]}", day.date)
            continue
        books[day.date], marks[day.date], states[day.date] = book, marking, day.state
    return build_panel(books, marks, states, lags)


def _skip(skips, reason, date):
    log.info("%s skipped: %s", date, reason)
    if skips is not None:
        skips[reason] += 1


# ---------------------------------------------------------------- metrics

def indicators(records: Sequence[ForecastRecord], method: str) -> np.ndarray:
    return np.array([r.exceeded(method) for r in records], dtype=float)


def violations(records: Sequence[ForecastRecord], method: str) -> np.ndarray:
    return np.array([r.violation(method) for r in records], dtype=float)


def rolling_exceedance(records: Sequence[ForecastRecord], alpha: float, window: int = 50,
                       methods: Iterable[str] = ("hist", "base", "conformal")) -> pd.DataFrame:
    """Trailing ``window``-record exceedance rate minus ``alpha``; full windows only."""
    methods = list(methods)
    cols = ["date"] + [f"gap_{m}" for m in methods]
    if len(records) < window:
        return pd.DataFrame(columns=cols)
    data = {"date": [r.date.isoformat() for r in records[window - 1:]]}
    kernel = np.ones(window)
    for m in methods:
        # integer counts keep the windowed means exact
        counts = np.convolve(indicators(records, m), kernel, mode="valid")
        data[f"gap_{m}"] = counts / window - alpha
    return pd.DataFrame(data, columns=cols)


def max_rolling(records, method, alpha, window=50) -> float | None:
    roll = rolling_exceedance(records, alpha, window, [method])
    return None if roll.empty else float(roll[f"gap_{method}"].max() + alpha)


def crisis_slice(records: Sequence[ForecastRecord], start: dt.date, end: dt.date,
                 method: str = "conformal") -> dict:
    if end < start:
        raise ValueError("crisis window ends before it starts")
    sub = [r for r in records if start <= r.date <= end]
    if not sub:
        return {"n": 0, "exceedance": None, "avg_violation": None, "descriptive": True}
    return {
        "n": len(sub),
        "exceedance": float(indicators(sub, method).mean()),
        "avg_violation": float(violations(sub, method).mean()),
        "descriptive": len(sub) < DESCRIPTIVE_N,
    }


def method_metrics(records: Sequence[ForecastRecord], method: str, cfg: BacktestConfig) -> dict:
    n = len(records)
    crisis = crisis_slice(records, cfg.crisis_start, cfg.crisis_end, method)
    return {
        "n": n,
        "exceedance": float(indicators(records, method).mean()) if n else None,
        "avg_violation": float(violations(records, method).mean()) if n else None,
        "max_roll": max_rolling(records, method, cfg.alpha, cfg.rolling_window),
        "crisis_exceedance": crisis["exceedance"],
        "crisis_avg_violation": crisis["avg_violation"],
        "crisis_n": crisis["n"],
        "crisis_descriptive": crisis["descriptive"],
    }


def operational_block(records: Sequence[ForecastRecord], panel_rows: int | None = None) -> dict:
    n = len(records)
    share = (lambda k: k / n) if n else (lambda k: None)
    return {
        "n": n,
        "strict_retention": share(sum(r.strict_ok for r in records)),
        "fallback_share": share(sum(r.n_fallback > 0 for r in records)),
        "interp_share": share(sum(r.n_interp > 0 for r in records)),
        "negative_base": sum(r.q_base < 0 for r in records),
        "negative_conformal": sum(r.q_rep < 0 for r in records),
        "regimes": dict(sorted(Counter(r.regime for r in records).items())),
        "panel_rows": panel_rows,
    }


# ---------------------------------------------------------------- ablation

ABLATION_STAGES = (("hist", "hist"), ("raw_base", "raw_base"),
                   ("base_floor", "base_floor"), ("conformal", "conformal"))


def _stage_threshold(r: ForecastRecord, stage: str) -> float:
    if stage == "base_floor":
        return max(r.q_base, 0.0)
    return r.threshold(stage)


def _stage_metrics(records, stage, cfg) -> dict:
    y = np.array([r.y_next for r in records], dtype=float)
    q = np.array([_stage_threshold(r, stage) for r in records], dtype=float)
    ind = (y > q).astype(float)
    n = len(records)
    gap = None
    if n >= cfg.rolling_window:
        gap = float(np.convolve(ind, np.ones(cfg.rolling_window), "valid").max() / cfg.rolling_window)
    crisis = [i for i, r in enumerate(records) if cfg.crisis_start <= r.date <= cfg.crisis_end]
    return {
        "n": n,
        "exceedance": float(ind.mean()) if n else None,
        "avg_violation": float(np.maximum(y - q, 0).mean()) if n else None,
        "max_roll": gap,
        "crisis_exceedance": float(ind[crisis].mean()) if crisis else None,
        "crisis_n": len(crisis),
    }


def ablation(runs: Mapping[str, Sequence[ForecastRecord]], cfg: BacktestConfig = BacktestConfig()) -> list[dict]:
    """Stage-by-stage table per marking policy, plus same-date intersection rows.

    ``runs`` maps a marking policy name to its records. Strict-markable dates
    must be a subset of robust-markable dates; otherwise the reruns are not
    aligned and the offending dates are named.
    """
    if "strict" in runs and "robust" in runs:
        extra = {r.date for r in runs["strict"]} - {r.date for r in runs["robust"]}
        if extra:
            shown = ", ".join(d.isoformat() for d in sorted(extra)[:10])
            raise AlignmentError(f"strict run has dates absent from robust run: {shown}")
    rows = []
    for policy in sorted(runs):
        for stage, _ in ABLATION_STAGES:
            rows.append({"sample": "own", "marking": policy, "stage": stage,
                         **_stage_metrics(runs[policy], stage, cfg)})
    if len(runs) > 1:
        common = set.intersection(*({r.date for r in recs} for recs in runs.values()))
        for policy in sorted(runs):
            sub = [r for r in runs[policy] if r.date in common]
            for stage, _ in ABLATION_STAGES:
                rows.append({"sample": "intersection", "marking": policy, "stage": stage,
                             **_stage_metrics(sub, stage, cfg)})
    return rows


# ---------------------------------------------------------------- outputs

RECORD_COLUMNS = [f.name for f in ForecastRecord.__dataclass_fields__.values()]


def records_frame(records: Sequence[ForecastRecord], book_type: str | None = None) -> pd.DataFrame:
    rows = []
    for r in records:
        d = asdict(r)
        d["date"], d["next_date"] = r.date.isoformat(), r.next_date.isoformat()
        d["strict_ok"] = int(r.strict_ok)
        for m in METHODS:
            d[f"I_{m}"] = int(r.exceeded(m))
            d[f"D_{m}"] = r.violation(m)
        rows.append(d)
    cols = RECORD_COLUMNS + [f"I_{m}" for m in METHODS] + [f"D_{m}" for m in METHODS]
    frame = pd.DataFrame(rows, columns=cols)
    if book_type is not None:
        frame.insert(0, "book_type", book_type)
    return frame


def records_from_frame(frame: pd.DataFrame) -> list[ForecastRecord]:
    out = []
    for row in frame.to_dict("records"):
        kw = {k: row[k] for k in RECORD_COLUMNS}
        kw["date"] = dt.date.fromisoformat(kw["date"])
        kw["next_date"] = dt.date.fromisoformat(kw["next_date"])
        kw["strict_ok"] = bool(kw["strict_ok"])
        for k in ("n_recent", "n_total", "model_id") + MODE_COLUMNS:
            kw[k] = int(kw[k])
        out.append(ForecastRecord(**kw))
    return out


def read_records_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def write_csv(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _clean_json(obj):
    if isinstance(obj, float):
        return None if math.isnan(obj) else obj
    if isinstance(obj, dict):
        return {str(k): _clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_json(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return _clean_json(float(obj))
    if isinstance(obj, (dt.date,)):
        return obj.isoformat()
    return obj


def dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_clean_json(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
