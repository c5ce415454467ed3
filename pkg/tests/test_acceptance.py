"""Acceptance gate: one test per exit criterion, each timed where a budget applies.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary lists
one PASS/FAIL line per criterion.
"""

import datetime as dt
import json
import math
import time
from fractions import Fraction
from itertools import combinations, product

import numpy as np
import pytest

from bookvar.backtest import BacktestConfig, build_book_panel, indicators, max_rolling, prepare_days, run_backtest
from bookvar.books import Book, BookType, Leg, normalization_scale, two_point_joint_laws, upper_quantile_discrete
from bookvar.cli import main
from bookvar.conformal import ConformalCalibrator, ConformalParams, reported_threshold, weighted_buffer
from bookvar.gbt import GBTParams, QuantileGBT, pinball_loss, pinball_negative_gradient, smoothed_pinball_loss
from bookvar.marking import BookMarking, MarkMode, MarkPolicy, MarkResult, distortion_bound
from bookvar.panel import compute_loss
from bookvar.synth import SynthConfig, generate
from oracles import brute_force_weighted_quantile

ALPHA = 0.10
T0 = dt.date(2000, 1, 3)


def _d(i):
    return T0 + dt.timedelta(days=i)


def _days(market):
    return prepare_days({s.date: c for s, c in zip(market.states, market.raw_chains)},
                        {m.date: m for m in market.markets})


@pytest.mark.acceptance(1, "weighted quantile bit-equal to O(n^2) oracle on 1,000 sets, < 5 s")
def test_weighted_quantile_matches_oracle():
    rng = np.random.default_rng(2024)
    cases = []
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        r = rng.standard_t(3, n)
        if rng.random() < 0.3:
            r = r.round(1)  # ties
        cases.append((r.tolist(), float(rng.choice([0.9, 0.97, 0.99, 0.999]))))
    start = time.perf_counter()
    got = [weighted_buffer(r, lam, ALPHA) for r, lam in cases]
    elapsed = time.perf_counter() - start
    want = [brute_force_weighted_quantile(r, lam, ALPHA) for r, lam in cases]
    mismatches = sum(g != w for g, w in zip(got, want))
    print(f"\n[1] mismatches={mismatches}/1000 time={elapsed:.2f}s")
    assert mismatches == 0
    assert elapsed < 5.0


@pytest.mark.acceptance(2, "iid coverage, W=250, 5,000 steps: exceedance in [0.089, 0.111], < 10 s")
def test_iid_coverage_simulation():
    rng = np.random.default_rng(99)
    y = rng.standard_t(4, 250 + 5000)
    q_ref = 0.0
    start = time.perf_counter()
    cal = ConformalCalibrator(ConformalParams(lam=0.99, window=250), ALPHA)
    hits = 0
    for i, v in enumerate(y):
        if i >= 250:
            q_core = q_ref + cal.decide(_d(i)).buffer
            hits += v > q_core
        cal.update(_d(i), float(v), q_ref)
    elapsed = time.perf_counter() - start
    rate = hits / 5000
    half = 2.5758 * math.sqrt(ALPHA * (1 - ALPHA) / 5000)
    print(f"\n[2] exceedance={rate:.4f} band=[{ALPHA - half:.4f}, {ALPHA + half:.4f}] time={elapsed:.2f}s")
    assert ALPHA - half <= rate <= ALPHA + half
    assert elapsed < 10.0


def _random_book(rng):
    n_opt = int(rng.integers(1, 5))
    legs, truth, marks = [], [], []
    for i in range(n_opt):
        w = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 2.0))
        entry = float(rng.uniform(0.5, 80.0))
        legs.append(Leg("option", w, entry, expiry=_d(30), strike=4000.0 + 25 * i, opt_type="C"))
    if rng.random() < 0.5:
        legs.append(Leg("spot", float(rng.uniform(-0.6, 0.6)), 4000.0))
    for leg in legs:
        m = float(leg.entry_mark * rng.uniform(0.6, 1.4))
        mode = MarkMode.SPOT_DIRECT if not leg.is_option else MarkMode(rng.choice(
            ["exact", "contract", "interp", "fallback"]))
        eps = 0.0 if mode in (MarkMode.EXACT_OPTION, MarkMode.EXACT_CONTRACT, MarkMode.SPOT_DIRECT) \
            else float(rng.uniform(0.0, 5.0))
        truth.append(m)
        marks.append((mode, eps, m + float(rng.uniform(-1.0, 1.0)) * eps))
    v0 = sum(l.weight * l.entry_mark for l in legs)
    gross = sum(abs(l.weight) * l.entry_mark for l in legs if l.is_option)
    book = Book(_d(0), BookType.ATM_STRADDLE, tuple(legs), v0, gross)
    return book, truth, marks


@pytest.mark.acceptance(3, "distortion inequality on 10,000 perturbed-mark books, zero violations, < 5 s")
def test_distortion_inequality():
    rng = np.random.default_rng(7)
    instances = [_random_book(rng) for _ in range(10_000)]
    start = time.perf_counter()
    violations = 0
    for book, truth, marks in instances:
        observed = [MarkResult(l, v, mode, eps) for l, (mode, eps, v) in zip(book.legs, marks)]
        exact = [MarkResult(l, m, MarkMode.EXACT_OPTION, 0.0) for l, m in zip(book.legs, truth)]
        y = compute_loss(book, BookMarking(book.date, _d(1), observed,
                                           sum(m.leg.weight * m.value for m in observed), {}, None, False))
        y_star = compute_loss(book, BookMarking(book.date, _d(1), exact,
                                                sum(m.leg.weight * m.value for m in exact), {}, None, True))
        bound = distortion_bound([l.weight for l in book.legs], [e for _, e, _ in marks],
                                 normalization_scale(book))
        violations += abs(y - y_star) > bound
    elapsed = time.perf_counter() - start
    print(f"\n[3] violations={violations}/10000 time={elapsed:.2f}s")
    assert violations == 0
    assert elapsed < 5.0


@pytest.mark.acceptance(4, "floor: q+ >= q, indicators monotone in floor, reported <= core exceedance")
def test_floor_properties():
    floors = [-0.05, 0.0, 0.01, 0.05, 0.2]
    failures = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = 600
        regime = np.cumsum(rng.random(n) < 0.01) % 2
        y = np.where(regime == 1, 0.08, 0.02) * rng.standard_t(4, n) - 0.01
        q_ref = 0.03 + 0.02 * np.sin(np.arange(n) / 40.0) + rng.normal(0, 0.01, n)
        cal = ConformalCalibrator(ConformalParams(window=250), ALPHA)
        core = np.empty(n)
        for i in range(n):
            core[i] = q_ref[i] + cal.decide(_d(i)).buffer
            cal.update(_d(i), float(y[i]), float(q_ref[i]))
        prev = None
        for f in floors:
            rep = np.array([reported_threshold(q_ref[i], core[i] - q_ref[i], f)[1] for i in range(n)])
            ind = y > rep
            failures += int(np.any(rep < core) or np.any(rep < f))
            failures += int(np.any(ind > (y > core)))
            failures += int(ind.mean() > (y > core).mean())
            if prev is not None:
                failures += int(np.any(ind > prev))
            prev = ind
    print(f"\n[4] failures={failures} over 20 paths x {len(floors)} floors")
    assert failures == 0


@pytest.mark.acceptance(5, "straddle on regime-switching synth: raw base > 0.13, conformal 0.10 +/- 0.03, "
                           "closer to nominal, smaller max rolling-50, < 3 min")
def test_end_to_end_pattern():
    start = time.perf_counter()
    days = _days(generate(SynthConfig(n_days=1275)))
    panel = build_book_panel(days, BookType.ATM_STRADDLE, MarkPolicy.ROBUST)
    recs = run_backtest(panel, BacktestConfig())
    elapsed = time.perf_counter() - start
    exc = {m: float(indicators(recs, m).mean()) for m in ("hist", "raw_base", "base", "conformal")}
    roll = {m: max_rolling(recs, m, ALPHA, 50) for m in ("raw_base", "base", "conformal")}
    print(f"\n[5] n={len(recs)} exceedance={json.dumps(exc)} max_roll50={json.dumps(roll)} time={elapsed:.1f}s")
    assert len(recs) >= 1200
    assert exc["raw_base"] > 0.13
    assert abs(exc["conformal"] - ALPHA) <= 0.03
    for base in ("raw_base", "base"):
        assert abs(exc["conformal"] - ALPHA) < abs(exc[base] - ALPHA)
        assert roll["conformal"] < roll[base]
    assert elapsed < 180.0


@pytest.mark.acceptance(6, "20% deletion: robust keeps more dates; strict dates share V_t+1")
def test_marking_tradeoff():
    days = _days(generate(SynthConfig(n_days=250, missing_prob=0.2)))
    for bt in BookType:
        strict = build_book_panel(days, bt, MarkPolicy.STRICT)
        robust = {r.date: r for r in build_book_panel(days, bt, MarkPolicy.ROBUST)}
        same = sum(r.date in robust and robust[r.date].value_t1 == r.value_t1 for r in strict)
        print(f"\n[6] {bt.value}: robust={len(robust)} strict={len(strict)} identical={same}")
        assert len(robust) > len(strict)
        assert same == len(strict)


@pytest.mark.acceptance(7, "200-stage pinball loss non-increasing; gradient within 1e-6 of central differences")
def test_pinball_training():
    days = _days(generate(SynthConfig(n_days=400)))
    panel = build_book_panel(days, BookType.ATM_STRADDLE)
    X = np.array([r.x_vector() for r in panel])
    X = np.where(np.isnan(X), 0.0, X)
    y = np.array([r.y_next for r in panel])
    model = QuantileGBT(1 - ALPHA, GBTParams(n_trees=200)).fit(X, y)
    steps = np.diff(model.train_loss)
    rng = np.random.default_rng(3)
    width = 0.01
    u = rng.uniform(-0.05, 0.05, 5000)
    u = u[(np.abs(u) > 1e-4) & (np.abs(np.abs(u) - width) > 1e-4)][:1000]
    assert len(u) == 1000
    h = 1e-7
    worst = 0.0
    for w, loss in ((0.0, lambda v: pinball_loss(v, 1 - ALPHA)),
                    (width, lambda v: smoothed_pinball_loss(v, 1 - ALPHA, width))):
        # u = y - f: perturb f by +/- h
        fd = -(loss(u - h) - loss(u + h)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(pinball_negative_gradient(u, 0.0, 1 - ALPHA, w) - fd))))
    print(f"\n[7] stages={len(steps)} max_step={steps.max():.3e} worst_grad_err={worst:.2e}")
    assert len(steps) == 200 and np.all(steps <= 0)
    assert worst <= 1e-6


@pytest.mark.acceptance(8, "two backtest runs with the same config and seed are byte-identical")
def test_determinism(tmp_path):
    cfg = {
        "seed": 5, "data": {"synth": {"n_days": 140, "seed": 5}},
        "book_types": ["atm_straddle", "sps25_10"], "gbt": {"n_trees": 20},
        "train_window": 60, "min_train_rows": 40,
        "conformal": {"window": 40, "warm_up_min": 10, "total_min": 10}, "rolling_window": 20,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["backtest", "--config", str(path), "--seed", "5", "--out", str(out)]) == 0
    same = {n: (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in ("records.csv", "report.json")}
    print(f"\n[8] identical={same}")
    assert all(same.values())


@pytest.mark.acceptance(9, "two-point joint laws: equal marginals, quantiles differ by 2 min(|b_j|, |b_k|)")
def test_two_point_construction():
    values = [Fraction(v, 4) for v in (-8, -3, -1, 1, 2, 5)]
    checked = 0
    for c in (Fraction(0), Fraction(3, 2), Fraction(-1, 3)):
        for n in (2, 3):
            for betas in product(values, repeat=n):
                for j, k in combinations(range(n), 2):
                    for alpha in (Fraction(1, 10), Fraction(1, 20)):
                        law_a, law_b = two_point_joint_laws(c, list(betas), j, k)
                        assert law_a["marginals"] == law_b["marginals"]
                        # both supports enumerated directly: xi = +1 / -1 with mass 1/2
                        bj, bk = betas[j], betas[k]
                        assert law_a["loss"] == _two_point(c - (bj + bk), c + (bj + bk))
                        assert law_b["loss"] == _two_point(c - (bj - bk), c + (bj - bk))
                        qa = upper_quantile_discrete(law_a["loss"], alpha)
                        qb = upper_quantile_discrete(law_b["loss"], alpha)
                        assert abs(qa - qb) == 2 * min(abs(bj), abs(bk))
                        checked += 1
    print(f"\n[9] configurations checked={checked}")
    assert checked > 1000


def _two_point(a, b):
    law = {}
    for v in (a, b):
        law[v] = law.get(v, 0) + Fraction(1, 2)
    return law
