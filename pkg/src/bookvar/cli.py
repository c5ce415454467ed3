"""``bookvar`` command line: ingest, synth, backtest, grid, report.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd
from pydantic import ValidationError

from .backtest import dump_json, write_csv
from .chain import (
    CHAIN_COLUMNS, DataError, clean_chain, read_chain_csv, read_market_csv, split_by_date,
    write_chain_csv, write_market_csv,
)
from .config import ConfigError, CsvSource, DataSource, RunConfig, load_config
from .runner import (
    REPORT_FILE, OutputSchemaError, recompute_report, run, run_grid, summary_table,
)
from .synth import SynthConfig, generate

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
log = logging.getLogger("bookvar")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_ingest(args) -> int:
    cfg = _config(args)
    if args.chain:
        if not (args.market and args.rates):
            raise ConfigError("--chain needs --market and --rates")
        src = CsvSource(chain=Path(args.chain), market=Path(args.market), rates=Path(args.rates))
    elif cfg.data.csv is not None:
        src = cfg.data.csv
    else:
        raise ConfigError("ingest needs CSV inputs (--chain/--market/--rates or data.csv)")
    chain = read_chain_csv(src.chain)
    markets = read_market_csv(src.market, src.rates)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cleaned, diags = [], []
    for date, raw in split_by_date(chain).items():
        market = markets.get(date)
        if market is None:
            raise DataError(f"{src.market}: no market row for {date}")
        if market.curve is None:
            raise DataError(f"{src.rates}: no zero curve for {date}")
        snap, diag = clean_chain(raw, market)
        cleaned.append(snap.frame)
        diags.append(diag.as_row())
    if not diags:
        log.warning("no chain rows ingested from %s", src.chain)
    frame = pd.concat(cleaned, ignore_index=True) if cleaned else pd.DataFrame(columns=CHAIN_COLUMNS)
    write_chain_csv(frame, out / "clean_chain.csv")
    diag_frame = pd.DataFrame(diags)
    write_csv(diag_frame, out / "diagnostics.csv")
    totals = {c: int(diag_frame[c].sum()) for c in diag_frame.columns if c != "date"} if diags else {}
    dump_json({"dates": len(diags), "totals": totals}, out / "ingest_summary.json")
    print(f"ingested {len(diags)} dates, {len(frame)} rows retained -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    synth = cfg.data.synth or SynthConfig(seed=cfg.seed)
    if args.n_days is not None:
        synth = SynthConfig.model_validate({**synth.model_dump(), "n_days": args.n_days})
    market = generate(synth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_chain_csv(market.full_chain(), out / "chain.csv")
    write_market_csv(market.markets, out / "market.csv", out / "rates.csv")
    states = pd.DataFrame([{"date": s.date.isoformat(), "spot": s.spot, "iv_level": s.iv_level,
                            "skew": s.skew, "regime": s.regime} for s in market.states])
    states.to_csv(out / "states.csv", index=False)
    (out / "synth_config.json").write_text(
        json.dumps(synth.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    csv_cfg = cfg.model_copy(update={"data": DataSource(csv=CsvSource(
        chain=Path("chain.csv"), market=Path("market.csv"), rates=Path("rates.csv")))})
    (out / "run_config.json").write_text(csv_cfg.dump(), encoding="utf-8")
    print(f"wrote {len(market.states)} synthetic dates -> {out}")
    return EXIT_OK


def cmd_backtest(args) -> int:
    cfg = _config(args)
    cfg.check_paths()
    report = run(cfg, Path(args.out))
    print(summary_table(report).to_string(index=False))
    return EXIT_OK


def _parse_axes(specs: list[str] | None, cfg: RunConfig) -> dict[str, list]:
    if not specs:
        return dict(cfg.grid)
    axes = {}
    for item in specs:
        name, _, values = item.partition("=")
        if not values:
            raise ConfigError(f"--axis expects name=v1,v2 (got {item!r})")
        parsed = []
        for v in values.split(","):
            v = v.strip()
            if v.lower() in ("none", "null"):
                parsed.append(None)
            else:
                try:
                    parsed.append(json.loads(v))
                except json.JSONDecodeError:
                    parsed.append(v)
        axes[name.strip()] = parsed
    return axes


def cmd_grid(args) -> int:
    cfg = _config(args)
    cfg.check_paths()
    axes = _parse_axes(args.axis, cfg)
    try:
        RunConfig.model_validate({**cfg.model_dump(mode="json"), "grid": axes})
        table = run_grid(cfg, axes, Path(args.out), jobs=args.jobs)
    except ValueError as exc:
        if isinstance(exc, (DataError, OutputSchemaError)):
            raise
        raise ConfigError(str(exc)) from exc
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    path = out / REPORT_FILE
    if not path.exists():
        raise DataError(f"{path} not found; run backtest first")
    report = json.loads(path.read_text(encoding="utf-8"))
    cfg_path = out / "config.json"
    cfg = load_config(cfg_path) if cfg_path.exists() else _config(args)
    recomputed = recompute_report(out, cfg)
    stored = {bt: b["methods"] for bt, b in report["books"].items()}
    if json.loads(json.dumps(recomputed)) != stored:
        raise DataError("report.json does not match metrics recomputed from records.csv")
    table = summary_table(report)
    write_csv(table, out / "summary.csv")
    print(table.to_string(index=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bookvar", description="Next-day VaR backtests for standardized option books.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--out", default=out_default, help="output directory")

    sp = sub.add_parser("ingest", help="parse and clean chain CSVs")
    common(sp, "ingested")
    sp.add_argument("--chain")
    sp.add_argument("--market")
    sp.add_argument("--rates")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("synth", help="write a synthetic market as CSVs")
    common(sp, "synth")
    sp.add_argument("--n-days", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("backtest", help="run the forecast backtest")
    common(sp, "out")
    sp.set_defaults(func=cmd_backtest)

    sp = sub.add_parser("grid", help="robustness grid over config axes")
    common(sp, "out")
    sp.add_argument("--axis", action="append", help="name=v1,v2 (repeatable)")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("report", help="verify and summarise a finished backtest")
    common(sp, "out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
