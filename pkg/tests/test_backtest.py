import dataclasses
import datetime as dt

import numpy as np
import pandas as pd
import pytest

from bookvar.backtest import (
    AlignmentError, BacktestConfig, ForecastRecord, ablation, crisis_slice, indicators, max_rolling,
    method_metrics, operational_block, read_records_csv, records_frame, records_from_frame,
    rolling_exceedance, run_backtest, write_csv,
)
from bookvar.conformal import ConformalParams, reported_threshold
from bookvar.forecaster import LinearParams, TrainWindowConfig
from bookvar.gbt import GBTParams
from bookvar.panel import FEATURE_NAMES, PanelRow

T0 = dt.date(2019, 1, 1)


def _d(i):
    return T0 + dt.timedelta(days=i)


def _panel(y, X=None):
    rows = []
    for i, v in enumerate(y):
        x = {} if X is None else dict(zip(FEATURE_NAMES, X[i]))
        rows.append(PanelRow(_d(i), _d(i + 1), "atm_straddle", float(v), x, 1.0, 1.0 - v, 1.0, 0.0, True,
                             {"exact": 2, "contract": 0, "interp": 0, "fallback": 0}))
    return rows


FAST = BacktestConfig(train=TrainWindowConfig(learner="linear", linear=LinearParams(n_iter=200)))


def _rec(i, y, q, **kw):
    base = dict(date=_d(i), next_date=_d(i + 1), y_next=y, q_base=q, q_hist=q, q_ref=q, buffer=0.0,
                regime="zero", n_recent=0, n_total=0, q_core=q, q_rep=q, model_id=0, n_exact=2,
                n_contract=0, n_interp=0, n_fallback=0, strict_ok=True, distortion_bound=0.0)
    base.update(kw)
    return ForecastRecord(**base)


def test_constant_zero_losses_never_exceed():
    recs = run_backtest(_panel(np.zeros(150)), FAST)
    assert len(recs) == 90
    for m in ("hist", "raw_base", "base", "conformal"):
        assert indicators(recs, m).sum() == 0
    assert all(r.q_rep == 0.0 and r.buffer == 0.0 for r in recs)


def test_warm_up_skips_until_min_train_rows():
    recs = run_backtest(_panel(np.linspace(0, 1, 100)), FAST)
    assert recs[0].date == _d(60)


def test_retrain_cadence():
    recs = run_backtest(_panel(np.random.default_rng(0).normal(size=100)), FAST)
    assert [r.model_id for r in recs[:11]] == [0] * 5 + [1] * 5 + [2]


def test_iid_heavy_tail_conformal_near_nominal():
    rng = np.random.default_rng(1)
    n = 2000
    X = rng.normal(size=(n, 3))
    y = 0.02 * rng.standard_t(3, size=n)
    recs = run_backtest(_panel(y, X), FAST)
    assert abs(indicators(recs, "conformal").mean() - 0.10) <= 0.02


def test_future_rows_do_not_change_past_forecasts():
    rng = np.random.default_rng(2)
    y = rng.normal(size=150)
    y2 = y.copy()
    y2[120:] = 50.0
    a, b = run_backtest(_panel(y), FAST), run_backtest(_panel(y2), FAST)
    cut = [r for r in a if r.date < _d(120)]
    assert cut == b[:len(cut)]
    # the forecast made at date 120 is fixed before its loss is known
    assert dataclasses.replace(a[len(cut)], y_next=50.0) == b[len(cut)]


def test_buffer_uses_residuals_against_reference():
    rng = np.random.default_rng(3)
    recs = run_backtest(_panel(rng.normal(size=200)), FAST)
    r = recs[-1]
    assert r.q_core == r.q_ref + r.buffer
    assert r.n_total == len(recs) - 1


def test_unsorted_panel_rejected():
    rows = _panel(np.zeros(5))
    with pytest.raises(ValueError):
        run_backtest(rows[::-1], FAST)


def test_rolling_matches_direct_loop():
    rng = np.random.default_rng(4)
    recs = [_rec(i, float(y), 0.0) for i, y in enumerate(rng.normal(-1.2, 1, 300))]
    roll = rolling_exceedance(recs, 0.1, 50, ["base"])
    ind = [r.y_next > r.q_ref for r in recs]
    expected = [sum(ind[i - 49:i + 1]) / 50 - 0.1 for i in range(49, 300)]
    np.testing.assert_array_equal(roll["gap_base"].to_numpy(), expected)
    assert roll["date"].iloc[0] == _d(49).isoformat()
    assert max_rolling(recs, "base", 0.1) == pytest.approx(max(expected) + 0.1)


def test_rolling_needs_full_window():
    recs = [_rec(i, 0.0, 0.0) for i in range(49)]
    assert rolling_exceedance(recs, 0.1, 50).empty
    assert max_rolling(recs, "base", 0.1) is None


def test_crisis_slice_examples():
    recs = [_rec(i, 1.0 if i % 4 == 0 else 0.0, 0.5) for i in range(100)]
    s = crisis_slice(recs, _d(10), _d(49))
    assert s == {"n": 40, "exceedance": 0.25, "avg_violation": pytest.approx(0.125), "descriptive": True}
    assert crisis_slice(recs, _d(0), _d(59))["descriptive"] is False
    assert crisis_slice(recs, _d(200), _d(210))["n"] == 0
    with pytest.raises(ValueError):
        crisis_slice(recs, _d(5), _d(4))


def test_method_metrics_and_operational_block():
    recs = [_rec(i, 1.0 if i % 10 == 0 else 0.0, 0.5, n_fallback=int(i % 5 == 0), strict_ok=i % 5 != 0)
            for i in range(100)]
    cfg = BacktestConfig(crisis_start=_d(0), crisis_end=_d(9))
    m = method_metrics(recs, "conformal", cfg)
    assert m["exceedance"] == 0.1 and m["avg_violation"] == pytest.approx(0.05)
    assert m["crisis_n"] == 10 and m["crisis_exceedance"] == 0.1
    op = operational_block(recs)
    assert op["strict_retention"] == 0.8 and op["fallback_share"] == 0.2
    assert op["regimes"] == {"zero": 100}


def test_ablation_alignment_error_names_dates():
    robust = [_rec(i, 0.0, 0.1) for i in range(10)]
    strict = [_rec(i, 0.0, 0.1) for i in range(5, 12)]
    with pytest.raises(AlignmentError, match=_d(10).isoformat()):
        ablation({"robust": robust, "strict": strict})


def test_ablation_floor_never_binds_when_base_positive():
    rng = np.random.default_rng(5)
    recs = [_rec(i, float(y), float(q)) for i, (y, q) in
            enumerate(zip(rng.normal(size=120), rng.uniform(0.1, 2, 120)))]
    rows = ablation({"robust": recs, "strict": recs[::2]}, BacktestConfig(rolling_window=20))
    own = {(r["marking"], r["stage"]): r for r in rows if r["sample"] == "own"}
    for pol in ("robust", "strict"):
        a, b = dict(own[(pol, "raw_base")]), dict(own[(pol, "base_floor")])
        a.pop("stage"), b.pop("stage")
        assert a == b
    inter = [r for r in rows if r["sample"] == "intersection"]
    assert {r["n"] for r in inter} == {60}


def test_ablation_identical_runs_give_identical_rows():
    recs = [_rec(i, float(i % 7) / 7, 0.5) for i in range(80)]
    rows = ablation({"robust": recs, "strict": recs}, BacktestConfig(rolling_window=20))
    by = {}
    for r in rows:
        key = (r["sample"], r["stage"])
        rest = {k: v for k, v in r.items() if k != "marking"}
        by.setdefault(key, []).append(rest)
    assert all(v[0] == v[1] for v in by.values())


def test_records_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(6)
    recs = run_backtest(_panel(rng.normal(size=120) / 3), FAST)
    write_csv(records_frame(recs, "rr25"), tmp_path / "r.csv")
    back = records_from_frame(read_records_csv(tmp_path / "r.csv"))
    assert back == recs
    f = records_frame(recs)
    np.testing.assert_array_equal(f["I_conformal"], [int(r.y_next > r.q_rep) for r in recs])
    np.testing.assert_array_equal(f["D_base"], [max(r.y_next - r.q_ref, 0.0) for r in recs])


def test_gbt_learner_runs_end_to_end():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(120, 3))
    cfg = BacktestConfig(train=TrainWindowConfig(gbt=GBTParams(n_trees=10)),
                         conformal=ConformalParams(window=40))
    recs = run_backtest(_panel(X[:, 0] + rng.normal(size=120), X), cfg)
    assert len(recs) == 60 and all(np.isfinite(r.q_rep) for r in recs)


def test_floor_applied_to_a_fixed_core_path_is_monotone():
    rng = np.random.default_rng(8)
    recs = run_backtest(_panel(rng.normal(-0.1, 0.2, 200)), FAST)
    y = np.array([r.y_next for r in recs])
    core = np.array([r.q_core for r in recs])
    prev = None
    for floor in (-1.0, 0.0, 0.05, 0.1, 0.3):
        rep = np.array([reported_threshold(r.q_ref, r.buffer, floor)[1] for r in recs])
        assert np.all(rep >= core)
        ind = y > rep
        assert np.all(ind <= (y > core))
        if prev is not None:
            assert np.all(ind <= prev)
        prev = ind
