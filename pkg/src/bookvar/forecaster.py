"""Rolling base quantile forecasts: learned model, historical benchmark and floor."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .gbt import GBTParams, QuantileGBT, pinball_loss
from .quantiles import upper_quantile


class FitFailed(Exception):
    pass


@dataclass(frozen=True)
class LinearParams:
    n_iter: int = 2000
    step: float = 0.05


@dataclass(frozen=True)
class TrainWindowConfig:
    window: int = 252
    retrain_every: int = 5
    alpha: float = 0.10
    floor: float | None = 0.0
    min_train_rows: int = 60
    learner: str = "gbt"
    gbt: GBTParams = field(default_factory=GBTParams)
    linear: LinearParams = field(default_factory=LinearParams)

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.window < 30 or self.retrain_every < 1:
            raise ValueError("window >= 30 and retrain_every >= 1 required")
        if self.learner not in ("gbt", "linear"):
            raise ValueError(f"unknown learner {self.learner!r}")


@dataclass
class LinearQuantile:
    """Linear pinball regression fitted by subgradient descent; keeps the best iterate."""

    tau: float
    params: LinearParams = field(default_factory=LinearParams)
    intercept: float = 0.0
    coef: np.ndarray | None = None

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LinearQuantile":
        n, p = X.shape
        b, w = upper_quantile(y, 1.0 - self.tau), np.zeros(p)
        best = (float(pinball_loss(y - b, self.tau).mean()), b, w.copy())
        for it in range(self.params.n_iter):
            u = y - (b + X @ w)
            g = self.tau - (u < 0)  # negative subgradient in the prediction
            eta = self.params.step / np.sqrt(it + 1.0)
            b += eta * g.mean()
            w += eta * (X.T @ g) / n
            loss = float(pinball_loss(y - (b + X @ w), self.tau).mean())
            if loss < best[0]:
                best = (loss, b, w.copy())
        _, self.intercept, self.coef = best
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + np.atleast_2d(X) @ self.coef


@dataclass
class QuantileModel:
    learner: str
    tau: float
    medians: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    estimator: QuantileGBT | LinearQuantile

    def transform(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        X = np.where(np.isnan(X), self.medians, X)
        return (X - self.means) / self.stds


def fit_quantile(X, y, alpha: float, cfg: TrainWindowConfig = TrainWindowConfig()) -> QuantileModel:
    """Fit the upper ``(1 - alpha)`` conditional quantile on one training window.

    Medians (for imputation) and moments (for standardization) come from this
    window only.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(y) < cfg.min_train_rows:
        raise FitFailed(f"{len(y)} training rows < {cfg.min_train_rows}")
    if not np.all(np.isfinite(y)):
        raise FitFailed("non-finite training target")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(X, axis=0)
    med = np.where(np.isfinite(med), med, 0.0)
    Xi = np.where(np.isnan(X), med, X)
    mu = Xi.mean(axis=0)
    sd = Xi.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (Xi - mu) / sd
    tau = 1.0 - alpha
    try:
        if cfg.learner == "gbt":
            est = QuantileGBT(tau, cfg.gbt).fit(Z, y)
        else:
            est = LinearQuantile(tau, cfg.linear).fit(Z, y)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        raise FitFailed(str(exc)) from exc
    model = QuantileModel(cfg.learner, tau, med, mu, sd, est)
    if not np.all(np.isfinite(est.predict(Z[:1]))):
        raise FitFailed("non-finite prediction after fit")
    return model


def predict(model: QuantileModel, x) -> float | np.ndarray:
    """Impute with stored medians, standardize with stored moments, predict."""
    out = model.estimator.predict(model.transform(x))
    return float(out[0]) if np.ndim(x) == 1 else out


def historical_benchmark(y, alpha: float) -> float:
    """Order-statistic upper ``(1 - alpha)``-quantile of past normalized losses."""
    if len(y) == 0:
        raise ValueError("historical benchmark needs at least one observation")
    return upper_quantile(y, alpha)


def apply_floor(q, floor: float | None):
    """``max(q, floor)``; identity when the floor is disabled (``None``)."""
    if floor is None:
        return q
    return np.maximum(q, floor) if np.ndim(q) else max(q, floor)
