"""End-to-end runs behind the CLI: load data, backtest each book, write reports."""

from __future__ import annotations

import itertools
import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import pandas as pd
from pydantic import BaseModel, ConfigDict

from .backtest import (
    METHODS, DayData, ForecastRecord, ablation, build_book_panel, dump_json, indicators,
    method_metrics, operational_block, prepare_days, read_records_csv, records_frame,
    records_from_frame, rolling_exceedance, run_backtest, violations, write_csv,
)
from .chain import DataError, read_chain_csv, read_market_csv, split_by_date
from .config import RunConfig
from .marking import MarkPolicy, NextDay
from .synth import generate

log = logging.getLogger(__name__)

RECORDS_FILE, REPORT_FILE, ROLLING_FILE, ABLATION_FILE = (
    "records.csv", "report.json", "rolling.csv", "ablation.csv")
ROLLING_COLUMNS = ["book_type", "date"] + [f"gap_{m}" for m in METHODS]
ABLATION_COLUMNS = ["book_type", "sample", "marking", "stage", "n", "exceedance",
                    "avg_violation", "max_roll", "crisis_exceedance", "crisis_n"]


def load_data(cfg: RunConfig):
    """``(raw chains by date, market days by date)`` from CSVs or the generator."""
    if cfg.data.synth is not None:
        market = generate(cfg.data.synth)
        return ({s.date: c for s, c in zip(market.states, market.raw_chains)},
                {m.date: m for m in market.markets})
    src = cfg.data.csv
    chains = split_by_date(read_chain_csv(src.chain))
    markets = read_market_csv(src.market, src.rates)
    missing = sorted(set(chains) - set(markets))
    if missing:
        raise DataError(f"{src.market}: no market row for chain dates {missing[:5]}")
    for d in sorted(chains):
        if markets[d].curve is None:
            raise DataError(f"{src.rates}: no zero curve for {d}")
    return chains, markets


def _pooled(records: list[ForecastRecord]) -> dict:
    out = {}
    for m in METHODS:
        n = len(records)
        out[m] = {
            "n": n,
            "exceedance": float(indicators(records, m).mean()) if n else None,
            "avg_violation": float(violations(records, m).mean()) if n else None,
        }
    return out


def backtest_days(days: list[DayData], cfg: RunConfig) -> dict:
    """Run every configured book on prepared days; returns tables and the report."""
    bc = cfg.backtest_config()
    if len(days) < cfg.min_train_rows + 2:
        raise DataError(f"{len(days)} usable dates; need at least {cfg.min_train_rows + 2}")
    next_days = [NextDay(d.snapshot, d.raw) for d in days]
    policies = ["robust", "strict"] if cfg.ablation else [cfg.marking]
    books, rec_frames, roll_frames, abl_rows, pooled = {}, [], [], [], []
    for bt in cfg.book_types:
        runs, skips, n_panel = {}, {}, {}
        for pol in policies:
            sk = Counter()
            panel = build_book_panel(days, bt, MarkPolicy(pol), skips=sk, next_days=next_days)
            runs[pol] = run_backtest(panel, bc)
            skips[pol], n_panel[pol] = dict(sorted(sk.items())), len(panel)
        main = runs[cfg.marking]
        pooled += main
        op = operational_block(main, n_panel[cfg.marking])
        op["skipped"] = skips[cfg.marking]
        if cfg.ablation:
            op["strict_panel_retention"] = (n_panel["strict"] / n_panel["robust"]
                                            if n_panel["robust"] else None)
        books[bt.value] = {"methods": {m: method_metrics(main, m, bc) for m in METHODS},
                           "operational": op}
        rec_frames.append(records_frame(main, bt.value))
        roll = rolling_exceedance(main, cfg.alpha, cfg.rolling_window, METHODS)
        roll.insert(0, "book_type", bt.value)
        roll_frames.append(roll)
        abl_rows += [{"book_type": bt.value, **r} for r in ablation(runs, bc)]
    diag = pd.DataFrame([d.diagnostics.as_row() for d in days])
    report = {
        "schema_version": 1,
        "alpha": cfg.alpha,
        "floor": cfg.floor,
        "marking": cfg.marking,
        "learner": cfg.learner,
        "n_dates": len(days),
        "first_date": days[0].date,
        "last_date": days[-1].date,
        "crisis_window": [cfg.crisis_start, cfg.crisis_end],
        "books": books,
        "pooled": _pooled(pooled),
        "filters": {c: int(diag[c].sum()) for c in diag.columns if c != "date"},
    }
    return {
        "report": report,
        "records": pd.concat(rec_frames, ignore_index=True),
        "rolling": pd.concat(roll_frames, ignore_index=True).reindex(columns=ROLLING_COLUMNS),
        "ablation": pd.DataFrame(abl_rows, columns=ABLATION_COLUMNS),
    }


def write_outputs(result: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_csv(result["records"], out / RECORDS_FILE)
    write_csv(result["rolling"], out / ROLLING_FILE)
    write_csv(result["ablation"], out / ABLATION_FILE)
    dump_json(result["report"], out / REPORT_FILE)
    validate_outputs(out)


def run(cfg: RunConfig, out: Path, days: list[DayData] | None = None) -> dict:
    if days is None:
        days = prepare_days(*load_data(cfg))
    result = backtest_days(days, cfg)
    write_outputs(result, Path(out))
    (Path(out) / "config.json").write_text(cfg.dump(), encoding="utf-8")
    return result["report"]


# ---------------------------------------------------------------- schema checks

class OutputSchemaError(ValueError):
    pass


class _MethodBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    n: int
    exceedance: float | None
    avg_violation: float | None
    max_roll: float | None
    crisis_exceedance: float | None
    crisis_avg_violation: float | None
    crisis_n: int
    crisis_descriptive: bool


class _BookBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")
    methods: dict[str, _MethodBlock]
    operational: dict


class _Report(BaseModel):
    model_config = ConfigDict(extra="forbid")
    schema_version: int
    alpha: float
    floor: float | None
    marking: str
    learner: str
    n_dates: int
    first_date: str
    last_date: str
    crisis_window: list[str]
    books: dict[str, _BookBlock]
    pooled: dict[str, dict]
    filters: dict[str, int]


def validate_outputs(out: Path) -> None:
    """Parse every output file back and check its columns and value ranges."""
    try:
        rep = _Report.model_validate(json.loads((out / REPORT_FILE).read_text(encoding="utf-8")))
    except Exception as exc:  # noqa: BLE001 - any parse failure is a schema failure
        raise OutputSchemaError(f"{REPORT_FILE}: {exc}") from exc
    for book in rep.books.values():
        for m in book.methods.values():
            if m.exceedance is not None and not 0 <= m.exceedance <= 1:
                raise OutputSchemaError("exceedance outside [0, 1]")
            if m.avg_violation is not None and m.avg_violation < 0:
                raise OutputSchemaError("negative average violation")
    expected = {
        RECORDS_FILE: ["book_type"] + list(records_frame([]).columns),
        ROLLING_FILE: ROLLING_COLUMNS,
        ABLATION_FILE: ABLATION_COLUMNS,
    }
    for name, cols in expected.items():
        frame = pd.read_csv(out / name)
        if list(frame.columns) != cols:
            raise OutputSchemaError(f"{name}: columns {list(frame.columns)} != {cols}")
    records_from_frame(read_records_csv(out / RECORDS_FILE))


# ---------------------------------------------------------------- report / grid

def recompute_report(out: Path, cfg: RunConfig) -> dict[str, dict]:
    """Per-book method metrics recomputed from ``records.csv`` alone."""
    frame = read_records_csv(out / RECORDS_FILE)
    bc = cfg.backtest_config()
    books = {}
    for bt, grp in frame.groupby("book_type", sort=True):
        recs = records_from_frame(grp.drop(columns="book_type"))
        books[bt] = {m: method_metrics(recs, m, bc) for m in METHODS}
    return books


def summary_table(report: dict) -> pd.DataFrame:
    rows = []
    for bt, block in sorted(report["books"].items()):
        m = block["methods"]
        rows.append({
            "book_type": bt, "n": m["conformal"]["n"],
            "hist_exc": m["hist"]["exceedance"], "base_exc": m["base"]["exceedance"],
            "raw_base_exc": m["raw_base"]["exceedance"], "conf_exc": m["conformal"]["exceedance"],
            "hist_viol": m["hist"]["avg_violation"], "base_viol": m["base"]["avg_violation"],
            "conf_viol": m["conformal"]["avg_violation"],
            "base_max_roll": m["base"]["max_roll"], "conf_max_roll": m["conformal"]["max_roll"],
        })
    return pd.DataFrame(rows)


def grid_combinations(axes: dict[str, list]) -> list[dict]:
    if not axes or any(len(v) == 0 for v in axes.values()):
        raise ValueError("grid needs at least one axis with at least one value")
    names = sorted(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*(axes[n] for n in names))]


def apply_axes(cfg: RunConfig, combo: dict) -> RunConfig:
    update, conformal = {}, {}
    for k, v in combo.items():
        if k == "lam":
            conformal["lam"] = v
        elif k == "window_w":
            conformal["window"] = v
        else:
            update[k] = v
    if conformal:
        update["conformal"] = cfg.conformal.model_copy(update=conformal)
    # round-trip through validation so bad axis values are config errors
    data = cfg.model_dump()
    data.update({k: (v.model_dump() if isinstance(v, BaseModel) else v) for k, v in update.items()})
    data["grid"] = {}
    return RunConfig.model_validate(data)


def combo_name(combo: dict) -> str:
    def fmt(v):
        return "none" if v is None else str(v)
    return "_".join(f"{k}-{fmt(combo[k])}" for k in sorted(combo))


def _grid_job(args):
    cfg, out, days = args
    return run(cfg, out, days)


def run_grid(cfg: RunConfig, axes: dict[str, list], out: Path, jobs: int = 1) -> pd.DataFrame:
    combos = grid_combinations(axes)
    subs = [(apply_axes(cfg, c), Path(out) / "grid" / combo_name(c)) for c in combos]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_grid_job, [(s, o, None) for s, o in subs]))
    else:
        days = prepare_days(*load_data(cfg))
        reports = [run(s, o, days) for s, o in subs]
    rows = []
    for combo, report in zip(combos, reports):
        for bt, block in sorted(report["books"].items()):
            m = block["methods"]
            rows.append({
                **{k: ("none" if v is None else v) for k, v in combo.items()}, "book_type": bt,
                "n": m["conformal"]["n"], "conf_exc": m["conformal"]["exceedance"],
                "conf_viol": m["conformal"]["avg_violation"],
                "conf_max_roll": m["conformal"]["max_roll"], "base_exc": m["base"]["exceedance"],
                "hist_exc": m["hist"]["exceedance"],
            })
    table = pd.DataFrame(rows)
    write_csv(table, Path(out) / "grid.csv")
    return table
