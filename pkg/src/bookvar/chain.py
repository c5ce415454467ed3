"""Daily option-chain snapshots: loading, forwards, cleaning and keyed lookup.

A chain is carried as a pandas frame with one row per contract. The raw CSV
columns are::

    trade_date, expiry, strike, type, bid, ask, iv, delta, open_interest, volume

``prepare_chain`` adds the derived columns ``mid, dte, tau, forward, k`` and
``clean_chain`` applies the screens in a fixed order, recording how many rows
each screen removed.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

CALL = "C"
PUT = "P"

CHAIN_COLUMNS = [
    "trade_date", "expiry", "strike", "type", "bid", "ask",
    "iv", "delta", "open_interest", "volume",
]
MARKET_COLUMNS = ["date", "spot", "div_yield", "vix", "vxv"]
RATE_COLUMNS = ["date", "tenor_days", "rate"]

DTE_MIN, DTE_MAX = 14, 120
K_MIN, K_MAX = -0.20, 0.10
MID_MIN = 0.05
REL_SPREAD_MAX = 0.50

# Screens in application order; "duplicate" runs first and is not a paper screen.
FILTER_ORDER = (
    "duplicate", "dte", "moneyness", "bid_positive", "ask_above_bid",
    "min_mid", "iv_positive", "rel_spread", "activity",
)


class DataError(ValueError):
    """Input data is missing or malformed."""


@dataclass(frozen=True)
class ZeroCurve:
    """Zero rates on a tenor grid, linear in tau with flat extrapolation."""

    tenors_days: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        if len(self.tenors_days) != len(self.rates) or not self.tenors_days:
            raise DataError("zero curve needs matching, non-empty tenors and rates")
        if any(b <= a for a, b in zip(self.tenors_days, self.tenors_days[1:])):
            raise DataError("zero curve tenors must be strictly increasing")

    @classmethod
    def flat(cls, rate: float) -> "ZeroCurve":
        return cls((365.0,), (float(rate),))

    def __call__(self, tau):
        return np.interp(np.asarray(tau, dtype=float) * 365.0, self.tenors_days, self.rates)


@dataclass(frozen=True)
class MarketDay:
    date: dt.date
    spot: float
    curve: ZeroCurve | None
    div_yield: float
    vix: float = float("nan")
    vxv: float = float("nan")

    def zero_rate(self, tau):
        if self.curve is None:
            raise DataError(f"{self.date}: no zero rate available for tau={tau}")
        return self.curve(tau)


@dataclass(frozen=True)
class OptionQuote:
    trade_date: dt.date
    expiry: dt.date
    strike: float
    opt_type: str
    bid: float
    ask: float
    iv: float | None
    delta: float | None
    open_interest: float
    volume: float
    k: float | None = None

    @property
    def mid(self) -> float:
        return (self.bid + self.ask) / 2.0

    @property
    def dte(self) -> int:
        return (self.expiry - self.trade_date).days

    @property
    def tau(self) -> float:
        return self.dte / 365.0


def compute_forward(market: MarketDay, tau):
    """Carry forward ``spot * exp((r(tau) - q) * tau)``; broadcasts over ``tau``."""
    tau_arr = np.asarray(tau, dtype=float)
    if np.any(tau_arr <= 0):
        raise ValueError(f"tau must be positive, got {tau}")
    if not market.spot > 0:
        raise DataError(f"{market.date}: spot must be positive, got {market.spot}")
    if not np.isfinite(market.div_yield):
        raise DataError(f"{market.date}: no dividend yield available for tau={tau}")
    rate = market.zero_rate(tau_arr)
    if not np.all(np.isfinite(rate)):
        raise DataError(f"{market.date}: no zero rate available for tau={tau}")
    fwd = market.spot * np.exp((rate - market.div_yield) * tau_arr)
    return float(fwd) if np.ndim(fwd) == 0 else fwd


def _to_date(value) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    return pd.Timestamp(value).date()


@dataclass
class ChainSnapshot:
    """One date's chain, sorted by (expiry, type, strike) with unique keys."""

    date: dt.date
    frame: pd.DataFrame
    market: MarketDay
    cleaned: bool = True
    _index: dict | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def empty(self) -> bool:
        return self.frame.empty

    def _key_index(self) -> dict:
        if self._index is None:
            f = self.frame
            exp = [d.date() for d in f["expiry"]]
            self._index = {
                (e, t, float(k)): i
                for i, (e, t, k) in enumerate(zip(exp, f["type"], f["strike"]))
            }
        return self._index

    def row(self, i: int) -> OptionQuote:
        r = self.frame.iloc[i]
        return OptionQuote(
            trade_date=self.date,
            expiry=r["expiry"].date(),
            strike=float(r["strike"]),
            opt_type=r["type"],
            bid=float(r["bid"]),
            ask=float(r["ask"]),
            iv=None if pd.isna(r["iv"]) else float(r["iv"]),
            delta=None if pd.isna(r["delta"]) else float(r["delta"]),
            open_interest=float(r["open_interest"]),
            volume=float(r["volume"]),
            k=None if pd.isna(r["k"]) else float(r["k"]),
        )

    def position(self, expiry, opt_type: str, strike: float) -> int | None:
        return self._key_index().get((_to_date(expiry), opt_type, float(strike)))

    def lookup(self, expiry, opt_type: str, strike: float) -> OptionQuote | None:
        i = self.position(expiry, opt_type, strike)
        return None if i is None else self.row(i)

    def quotes(self) -> Iterator[OptionQuote]:
        for i in range(len(self.frame)):
            yield self.row(i)


@dataclass
class FilterDiagnostics:
    date: dt.date
    raw_count: int
    dropped: dict[str, int]
    retained: int

    def as_row(self) -> dict:
        return {"date": self.date.isoformat(), "raw": self.raw_count,
                **{f"drop_{k}": v for k, v in self.dropped.items()},
                "retained": self.retained}


def _check_single_date(raw: pd.DataFrame, market: MarketDay) -> None:
    if "trade_date" in raw and len(raw):
        dates = pd.to_datetime(raw["trade_date"]).dt.date.unique()
        if len(dates) != 1 or dates[0] != market.date:
            raise DataError(
                f"chain rows must all be dated {market.date}, found {sorted(dates)[:3]}"
            )


def _dedupe(raw: pd.DataFrame) -> pd.DataFrame:
    """Keep one row per key: larger open interest, then volume, then first seen."""
    if not raw.duplicated(subset=["expiry", "type", "strike"]).any():
        return raw
    f = raw.assign(_pos=np.arange(len(raw)))
    f = f.sort_values(
        ["open_interest", "volume", "_pos"], ascending=[False, False, True],
        kind="mergesort", na_position="last",
    )
    f = f.drop_duplicates(subset=["expiry", "type", "strike"], keep="first")
    return f.sort_values("_pos", kind="mergesort").drop(columns="_pos")


def prepare_chain(raw: pd.DataFrame, market: MarketDay) -> ChainSnapshot:
    """Deduplicate and add derived columns without applying any screen."""
    _check_single_date(raw, market)
    f = raw.loc[:, [c for c in CHAIN_COLUMNS if c in raw.columns]].copy()
    f["expiry"] = pd.to_datetime(f["expiry"])
    for col in ("strike", "bid", "ask", "iv", "delta", "open_interest", "volume"):
        f[col] = pd.to_numeric(f[col], errors="coerce").astype(float)
    f = _dedupe(f)
    date_ts = pd.Timestamp(market.date)
    f["mid"] = (f["bid"] + f["ask"]) / 2.0
    f["dte"] = (f["expiry"] - date_ts).dt.days.astype(int)
    f["tau"] = f["dte"] / 365.0
    live = f["tau"] > 0
    fwd = np.full(len(f), np.nan)
    if live.any():
        fwd[live.to_numpy()] = compute_forward(market, f.loc[live, "tau"].to_numpy())
    f["forward"] = fwd
    f["k"] = np.log(f["strike"] / f["forward"])
    f = f.sort_values(["expiry", "type", "strike"], kind="mergesort").reset_index(drop=True)
    return ChainSnapshot(market.date, f, market, cleaned=False)


def _screens(f: pd.DataFrame) -> list[tuple[str, pd.Series]]:
    spread = (f["ask"] - f["bid"]) / f["mid"]
    activity = f["open_interest"].fillna(0.0) + f["volume"].fillna(0.0)
    return [
        ("dte", (f["dte"] >= DTE_MIN) & (f["dte"] <= DTE_MAX)),
        ("moneyness", (f["k"] >= K_MIN) & (f["k"] <= K_MAX)),
        ("bid_positive", f["bid"] > 0),
        ("ask_above_bid", f["ask"] > f["bid"]),
        ("min_mid", f["mid"] > MID_MIN),
        ("iv_positive", f["iv"] > 0),
        ("rel_spread", spread <= REL_SPREAD_MAX),
        ("activity", activity >= 1),
    ]


def clean_chain(raw: pd.DataFrame, market: MarketDay) -> tuple[ChainSnapshot, FilterDiagnostics]:
    """Apply the screens in order and count the rows each one removes."""
    return screen_chain(prepare_chain(raw, market), len(raw))


def screen_chain(prepared: ChainSnapshot, raw_count: int) -> tuple[ChainSnapshot, FilterDiagnostics]:
    """Screen an already prepared chain; ``raw_count`` counts rows before dedupe."""
    market = prepared.market
    f = prepared.frame
    dropped = {"duplicate": raw_count - len(f)}
    keep = np.ones(len(f), dtype=bool)
    for name, mask in _screens(f):
        passed = keep & mask.to_numpy(dtype=bool, na_value=False)
        dropped[name] = int(keep.sum() - passed.sum())
        keep = passed
    out = f.loc[keep].reset_index(drop=True)
    diag = FilterDiagnostics(market.date, raw_count, dropped, len(out))
    return ChainSnapshot(market.date, out, market, cleaned=True), diag


# ---------------------------------------------------------------- CSV I/O


def _parse_dates(series: pd.Series, what: str, path) -> pd.Series:
    parsed = pd.to_datetime(series, format="%Y-%m-%d", errors="coerce")
    bad = parsed.isna() & series.notna()
    bad |= series.isna()
    if bad.any():
        line = int(np.flatnonzero(bad.to_numpy())[0]) + 2  # header is line 1
        raise DataError(f"{path}: line {line}: unparseable {what} {series.iloc[line - 2]!r}")
    return parsed


def _read_csv(path, columns: list[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    if path.stat().st_size == 0:
        log.warning("%s is empty", path)
        return pd.DataFrame(columns=columns)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""])
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    return frame


def _parse_numeric(frame: pd.DataFrame, cols, path, required=()) -> None:
    for col in cols:
        vals = pd.to_numeric(frame[col], errors="coerce")
        bad = vals.isna() & frame[col].notna()
        if col in required:
            bad |= frame[col].isna()
        if bad.any():
            line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
            raise DataError(f"{path}: line {line}: bad {col} value {frame[col].iloc[line - 2]!r}")
        # to_numeric is only used to locate bad cells; astype(float) parses exactly
        frame[col] = frame[col].astype(float)


def read_chain_csv(path) -> pd.DataFrame:
    f = _read_csv(path, CHAIN_COLUMNS)
    f["trade_date"] = _parse_dates(f["trade_date"], "trade_date", path)
    f["expiry"] = _parse_dates(f["expiry"], "expiry", path)
    bad_type = ~f["type"].isin([CALL, PUT])
    if bad_type.any():
        line = int(np.flatnonzero(bad_type.to_numpy())[0]) + 2
        raise DataError(f"{path}: line {line}: option type must be C or P")
    _parse_numeric(f, ["strike", "bid", "ask", "iv", "delta", "open_interest", "volume"],
                   path, required=("strike",))
    return f[CHAIN_COLUMNS]


def write_chain_csv(frame: pd.DataFrame, path) -> None:
    out = frame.loc[:, CHAIN_COLUMNS].copy()
    for col in ("trade_date", "expiry"):
        out[col] = pd.to_datetime(out[col]).dt.strftime("%Y-%m-%d")
    out.to_csv(path, index=False)


def read_market_csv(market_path, rates_path) -> dict[dt.date, MarketDay]:
    m = _read_csv(market_path, MARKET_COLUMNS)
    m["date"] = _parse_dates(m["date"], "date", market_path)
    _parse_numeric(m, ["spot", "div_yield", "vix", "vxv"], market_path, required=("spot",))
    r = _read_csv(rates_path, RATE_COLUMNS)
    r["date"] = _parse_dates(r["date"], "date", rates_path)
    _parse_numeric(r, ["tenor_days", "rate"], rates_path, required=("tenor_days", "rate"))
    curves: dict[dt.date, ZeroCurve] = {}
    for day, grp in r.sort_values(["date", "tenor_days"]).groupby("date"):
        curves[day.date()] = ZeroCurve(tuple(grp["tenor_days"]), tuple(grp["rate"]))
    out = {}
    for row in m.itertuples(index=False):
        day = row.date.date()
        out[day] = MarketDay(day, row.spot, curves.get(day), row.div_yield, row.vix, row.vxv)
    return out


def write_market_csv(markets: list[MarketDay], market_path, rates_path) -> None:
    pd.DataFrame(
        [(m.date.isoformat(), m.spot, m.div_yield, m.vix, m.vxv) for m in markets],
        columns=MARKET_COLUMNS,
    ).to_csv(market_path, index=False)
    rows = []
    for m in markets:
        if m.curve is None:
            continue
        rows += [(m.date.isoformat(), t, r) for t, r in zip(m.curve.tenors_days, m.curve.rates)]
    pd.DataFrame(rows, columns=RATE_COLUMNS).to_csv(rates_path, index=False)


def split_by_date(chain: pd.DataFrame) -> dict[dt.date, pd.DataFrame]:
    return {d.date(): g for d, g in chain.groupby("trade_date", sort=True)}


# ---------------------------------------------------------------- selection helpers


def nearest_expiry(frame: pd.DataFrame, target_dte: int):
    """Expiry minimising ``|dte - target|``; ties go to the shorter maturity."""
    if frame.empty:
        return None
    by_exp = frame.groupby("expiry", sort=True)["dte"].first()
    gap = (by_exp - target_dte).abs().to_numpy()
    order = np.lexsort((by_exp.to_numpy(), gap))
    return by_exp.index[order[0]]


def nearest_abs_delta(frame: pd.DataFrame, opt_type: str, target: float) -> int | None:
    """Row label of the ``opt_type`` quote whose |delta| is closest to ``target``.

    Rows without a delta are skipped; ties go to the smaller strike.
    """
    cand = frame[(frame["type"] == opt_type) & frame["delta"].notna()]
    if cand.empty:
        return None
    gap = (cand["delta"].abs() - target).abs().to_numpy()
    order = np.lexsort((cand["strike"].to_numpy(), gap))
    return cand.index[order[0]]
