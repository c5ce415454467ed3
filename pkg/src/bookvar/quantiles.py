"""Order-statistic quantiles shared by the panel, forecasters and conformal layer."""

from __future__ import annotations

import math

import numpy as np


def upper_rank(n: int, level: float) -> int:
    """Smallest 1-based rank ``k`` with ``k / n >= level`` (evaluated in floats)."""
    if n < 1:
        raise ValueError("need at least one observation")
    k = min(max(math.ceil(level * n), 1), n)
    while k > 1 and (k - 1) / n >= level:
        k -= 1
    while k < n and k / n < level:
        k += 1
    return k


def upper_quantile(values, alpha: float) -> float:
    """Empirical upper ``(1 - alpha)``-quantile: ``y_(k)`` with the smallest ``k/n >= 1 - alpha``."""
    y = np.sort(np.asarray(values, dtype=float))
    return float(y[upper_rank(len(y), 1.0 - alpha) - 1])
