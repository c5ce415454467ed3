import json

import pandas as pd
import pytest

from bookvar.cli import main

QUICK = {
    "seed": 11,
    "data": {"synth": {"n_days": 130, "seed": 11, "start_date": "2019-06-03"}},
    "book_types": ["atm_straddle", "rr25"],
    "learner": "linear",
    "linear": {"n_iter": 100},
    "train_window": 60,
    "min_train_rows": 40,
    "conformal": {"window": 30, "warm_up_min": 10, "total_min": 10},
    "rolling_window": 20,
}


@pytest.fixture
def quick_config(tmp_path):
    p = tmp_path / "quick.json"
    p.write_text(json.dumps(QUICK))
    return p


def _files(out):
    return {n: (out / n).read_bytes() for n in ("records.csv", "report.json", "rolling.csv", "ablation.csv")}


def test_backtest_then_report(quick_config, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["backtest", "--config", str(quick_config), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["books"]) == {"atm_straddle", "rr25"}
    assert set(report["books"]["rr25"]["methods"]) == {"hist", "raw_base", "base", "conformal"}
    recs = pd.read_csv(out / "records.csv")
    assert {"book_type", "date", "q_rep", "I_conformal", "D_conformal"} <= set(recs.columns)
    assert main(["report", "--out", str(out)]) == 0
    assert (out / "summary.csv").exists()
    # tampering with the report is detected
    report["books"]["rr25"]["methods"]["conformal"]["exceedance"] = 0.5
    (out / "report.json").write_text(json.dumps(report))
    assert main(["report", "--out", str(out)]) == 3


def test_backtest_is_byte_deterministic(quick_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["backtest", "--config", str(quick_config), "--out", str(a)]) == 0
    assert main(["backtest", "--config", str(quick_config), "--out", str(b)]) == 0
    assert _files(a) == _files(b)


def test_seed_flag_changes_the_market(quick_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["backtest", "--config", str(quick_config), "--out", str(a)])
    main(["backtest", "--config", str(quick_config), "--seed", "12", "--out", str(b)])
    assert (a / "records.csv").read_bytes() != (b / "records.csv").read_bytes()
    assert json.loads((b / "config.json").read_text())["data"]["synth"]["seed"] == 12


def test_synth_csvs_reproduce_in_memory_backtest(quick_config, tmp_path):
    syn = tmp_path / "syn"
    assert main(["synth", "--config", str(quick_config), "--out", str(syn)]) == 0
    assert main(["ingest", "--config", str(syn / "run_config.json"), "--out", str(tmp_path / "ing")]) == 0
    summary = json.loads((tmp_path / "ing" / "ingest_summary.json").read_text())
    assert summary["dates"] == 130
    a, b = tmp_path / "mem", tmp_path / "csv"
    main(["backtest", "--config", str(quick_config), "--out", str(a)])
    assert main(["backtest", "--config", str(syn / "run_config.json"), "--out", str(b)]) == 0
    assert (a / "records.csv").read_bytes() == (b / "records.csv").read_bytes()


def test_one_by_one_grid_matches_backtest(quick_config, tmp_path):
    bt, gr = tmp_path / "bt", tmp_path / "gr"
    main(["backtest", "--config", str(quick_config), "--out", str(bt)])
    assert main(["grid", "--config", str(quick_config), "--out", str(gr), "--axis", "floor=0.0"]) == 0
    sub = gr / "grid" / "floor-0.0"
    assert _files(sub) == _files(bt)


def test_two_by_two_grid(quick_config, tmp_path):
    gr = tmp_path / "gr"
    rc = main(["grid", "--config", str(quick_config), "--out", str(gr),
               "--axis", "floor=0.0,none", "--axis", "lam=0.97,0.99"])
    assert rc == 0
    subs = sorted(p.name for p in (gr / "grid").iterdir())
    assert subs == ["floor-0.0_lam-0.97", "floor-0.0_lam-0.99", "floor-none_lam-0.97", "floor-none_lam-0.99"]
    table = pd.read_csv(gr / "grid.csv")
    assert len(table) == 4 * 2


@pytest.mark.parametrize("body", ["{not json", json.dumps({"alpha": 2}), json.dumps({"bogus": 1}),
                                  json.dumps({"schema_version": 9})])
def test_bad_config_exit_2(tmp_path, body):
    p = tmp_path / "c.json"
    p.write_text(body)
    assert main(["backtest", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_file_exit_2(tmp_path):
    assert main(["backtest", "--config", str(tmp_path / "nope.json")]) == 2


def test_missing_data_path_exit_2(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"data": {"csv": {"chain": "x.csv", "market": "m.csv", "rates": "r.csv"}}}))
    assert main(["backtest", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_bad_grid_axis_exit_2(quick_config, tmp_path):
    assert main(["grid", "--config", str(quick_config), "--out", str(tmp_path), "--axis", "floor="]) == 2
    assert main(["grid", "--config", str(quick_config), "--out", str(tmp_path), "--axis", "depth=1,2"]) == 2
    assert main(["grid", "--config", str(quick_config), "--out", str(tmp_path), "--axis", "lam=1.5"]) == 2


def test_corrupt_chain_exit_3(quick_config, tmp_path, capsys):
    syn = tmp_path / "syn"
    main(["synth", "--config", str(quick_config), "--n-days", "5", "--out", str(syn)])
    lines = (syn / "chain.csv").read_text().splitlines()
    lines[3] = lines[3].replace(lines[3].split(",")[0], "2019-13-45", 1)
    (syn / "chain.csv").write_text("\n".join(lines) + "\n")
    assert main(["ingest", "--config", str(syn / "run_config.json"), "--out", str(tmp_path / "i")]) == 3
    assert "line 4" in capsys.readouterr().err


def test_too_few_dates_exit_3(quick_config, tmp_path):
    syn = tmp_path / "syn"
    main(["synth", "--config", str(quick_config), "--n-days", "20", "--out", str(syn)])
    assert main(["backtest", "--config", str(syn / "run_config.json"), "--out", str(tmp_path / "o")]) == 3


def test_report_without_run_exit_3(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 3
