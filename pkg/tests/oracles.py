"""Slow reference implementations the package is checked against."""

import math


def brute_force_weighted_quantile(residuals, lam, alpha):
    """O(n^2) ECDF inversion: scan candidates, sum weights of all residuals not above each."""
    n = len(residuals)
    raw = [lam ** (n - i) for i in range(n)]
    total = math.fsum(raw)
    w = [r / total for r in raw]
    for z in sorted(residuals):
        if math.fsum(w[i] for i in range(n) if residuals[i] <= z) >= 1.0 - alpha:
            return z
    return max(residuals)
