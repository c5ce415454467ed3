"""Run configuration: one versioned JSON document plus CLI flag overrides."""

from __future__ import annotations

import datetime as dt
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .backtest import CRISIS_END, CRISIS_START, BacktestConfig
from .books import BookType
from .conformal import ConformalParams
from .forecaster import LinearParams, TrainWindowConfig
from .gbt import GBTParams
from .synth import SynthConfig

SCHEMA_VERSION = 1
GRID_AXES = ("learner", "marking", "floor", "lam", "window_w")


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CsvSource(_Strict):
    chain: Path
    market: Path
    rates: Path


class DataSource(_Strict):
    csv: CsvSource | None = None
    synth: SynthConfig | None = None

    @model_validator(mode="after")
    def _one(self):
        if (self.csv is None) == (self.synth is None):
            raise ValueError("data needs exactly one of 'csv' or 'synth'")
        return self


class GBTSection(_Strict):
    n_trees: int = Field(200, ge=0)
    max_depth: int = Field(3, ge=1)
    learn_rate: float = Field(0.05, gt=0, le=1)
    min_leaf: int = Field(10, ge=1)
    max_bins: int = Field(64, ge=2)


class LinearSection(_Strict):
    n_iter: int = Field(2000, ge=1)
    step: float = Field(0.05, gt=0)


class ConformalSection(_Strict):
    lam: float = Field(0.99, gt=0, lt=1)
    window: int = Field(250, ge=1)
    warm_up_min: int = Field(30, ge=1)
    total_min: int = Field(30, ge=1)


class RunConfig(_Strict):
    schema_version: Literal[1] = SCHEMA_VERSION
    seed: int = 7
    data: DataSource = Field(default_factory=lambda: DataSource(synth=SynthConfig()))
    book_types: list[BookType] = Field(default_factory=lambda: list(BookType), min_length=1)
    alpha: float = Field(0.10, gt=0, lt=1)
    floor: float | None = 0.0
    marking: Literal["robust", "strict"] = "robust"
    ablation: bool = True
    learner: Literal["gbt", "linear"] = "gbt"
    gbt: GBTSection = GBTSection()
    linear: LinearSection = LinearSection()
    train_window: int = Field(252, ge=30)
    retrain_every: int = Field(5, ge=1)
    min_train_rows: int = Field(60, ge=1)
    conformal: ConformalSection = ConformalSection()
    rolling_window: int = Field(50, ge=1)
    crisis_start: dt.date = CRISIS_START
    crisis_end: dt.date = CRISIS_END
    grid: dict[str, list] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self):
        if self.crisis_end < self.crisis_start:
            raise ValueError("crisis_end precedes crisis_start")
        bad = set(self.grid) - set(GRID_AXES)
        if bad:
            raise ValueError(f"unknown grid axes {sorted(bad)}; allowed {list(GRID_AXES)}")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        data = self.data
        if data.synth is not None:
            data = data.model_copy(update={"synth": data.synth.model_copy(update={"seed": seed})})
        return self.model_copy(update={"seed": seed, "data": data})

    def backtest_config(self) -> BacktestConfig:
        g, lin, c = self.gbt, self.linear, self.conformal
        train = TrainWindowConfig(
            window=self.train_window, retrain_every=self.retrain_every, alpha=self.alpha,
            floor=self.floor, min_train_rows=self.min_train_rows, learner=self.learner,
            gbt=GBTParams(g.n_trees, g.max_depth, g.learn_rate, g.min_leaf, g.max_bins),
            linear=LinearParams(lin.n_iter, lin.step),
        )
        return BacktestConfig(train, ConformalParams(c.lam, c.window, c.warm_up_min, c.total_min),
                              self.rolling_window, self.crisis_start, self.crisis_end)

    def check_paths(self, base: Path | None = None) -> None:
        if self.data.csv is None:
            return
        for name in ("chain", "market", "rates"):
            p = getattr(self.data.csv, name)
            if base is not None and not p.is_absolute():
                p = base / p
            if not p.exists():
                raise ConfigError(f"data.csv.{name}: {p} does not exist")

    def resolved(self, base: Path) -> "RunConfig":
        """Copy with relative CSV paths anchored at ``base``."""
        if self.data.csv is None:
            return self
        csv = self.data.csv
        fix = {n: (p if p.is_absolute() else base / p)
               for n in ("chain", "market", "rates") for p in [getattr(csv, n)]}
        return self.model_copy(update={"data": DataSource(csv=CsvSource(**fix))})

    def dump(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg.resolved(path.parent.resolve())
