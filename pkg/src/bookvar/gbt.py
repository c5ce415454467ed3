"""Gradient-boosted regression trees for the pinball (quantile) loss.

Each stage grows a depth-limited least-squares tree on the negative pinball
gradient using per-feature histograms, then replaces every leaf value with the
``tau``-quantile of the current residuals falling in that leaf, scaled by the
learning rate. The quantile is the exact per-leaf minimiser of the pinball
loss, so with ``0 < learn_rate <= 1`` convexity makes the training loss
non-increasing stage by stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quantiles import upper_rank

MIN_GAIN = 1e-9


def pinball_loss(u, tau: float):
    """``rho_tau(u) = u * (tau - 1{u < 0})`` elementwise, with ``u = y - f``."""
    u = np.asarray(u, dtype=float)
    return u * (tau - (u < 0))


def smoothed_pinball_loss(u, tau: float, width: float):
    """Pinball loss with the kink replaced by a quadratic on ``|u| <= width``.

    Equals ``pinball_loss`` shifted by ``-width*tau/2`` (right) or
    ``-width*(1-tau)/2`` (left) outside the band; ``width=0`` is the plain loss.
    """
    u = np.asarray(u, dtype=float)
    if width <= 0:
        return pinball_loss(u, tau)
    side = np.where(u >= 0, tau, 1.0 - tau)
    inner = side * u * u / (2.0 * width)
    outer = pinball_loss(u, tau) - side * width / 2.0
    return np.where(np.abs(u) <= width, inner, outer)


def pinball_negative_gradient(y, f, tau: float, width: float = 0.0):
    """Negative gradient in ``f`` of the (smoothed) pinball loss of ``y - f``."""
    u = np.asarray(y, dtype=float) - np.asarray(f, dtype=float)
    hard = tau - (u < 0)
    if width <= 0:
        return hard.astype(float)
    side = np.where(u >= 0, tau, 1.0 - tau)
    return np.where(np.abs(u) <= width, side * u / width, hard)


@dataclass(frozen=True)
class GBTParams:
    n_trees: int = 200
    max_depth: int = 3
    learn_rate: float = 0.05
    min_leaf: int = 10
    max_bins: int = 64
    smoothing: float = 0.0

    def __post_init__(self):
        if not 0 < self.learn_rate <= 1:
            raise ValueError("learn_rate must be in (0, 1]")
        if self.max_depth < 1 or self.min_leaf < 1 or self.max_bins < 2:
            raise ValueError("max_depth, min_leaf >= 1 and max_bins >= 2 required")


def bin_edges(X: np.ndarray, max_bins: int) -> list[np.ndarray]:
    """Candidate split thresholds per column (a split sends ``x <= edge`` left)."""
    edges = []
    for col in X.T:
        uniq = np.unique(col)[:-1]
        if uniq.size > max_bins - 1:
            pick = np.linspace(0, uniq.size - 1, max_bins - 1).round().astype(int)
            uniq = uniq[np.unique(pick)]
        edges.append(uniq)
    return edges


def apply_bins(X: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    out = np.empty(X.shape, dtype=np.int64)
    for j, e in enumerate(edges):
        out[:, j] = np.searchsorted(e, X[:, j], side="left")
    return out


@dataclass
class Tree:
    """Complete binary tree in heap layout; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            go_right = X[rows, np.where(internal, f, 0)] > self.threshold[node]
            node = np.where(internal, 2 * node + 1 + go_right, node)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.leaf_index(X)]


def grow_tree(B: np.ndarray, g: np.ndarray, edges: list[np.ndarray], max_depth: int,
              min_leaf: int, n_bins: int) -> tuple[Tree, np.ndarray]:
    """Least-squares tree on targets ``g`` over binned features ``B``.

    Returns the tree (values unset) and each training row's leaf id.
    """
    n, p = B.shape
    size = 2 ** (max_depth + 1) - 1
    feature = np.full(size, -1, dtype=np.int64)
    threshold = np.zeros(size)
    node = np.zeros(n, dtype=np.int64)
    col_offset = np.arange(p) * n_bins
    for depth in range(max_depth):
        lo, width = 2**depth - 1, 2**depth
        local = node - lo
        rows = np.flatnonzero(local >= 0)
        if rows.size == 0:
            break
        loc = local[rows]
        flat = (loc[:, None] * (p * n_bins) + col_offset[None, :] + B[rows]).ravel()
        nslots = width * p * n_bins
        hist_g = np.bincount(flat, weights=np.repeat(g[rows], p), minlength=nslots)
        hist_n = np.bincount(flat, minlength=nslots).astype(float)
        cg = np.cumsum(hist_g.reshape(width, p, n_bins), axis=2)
        cn = np.cumsum(hist_n.reshape(width, p, n_bins), axis=2)
        tot_g, tot_n = cg[:, :, -1:], cn[:, :, -1:]
        gl, nl = cg[:, :, :-1], cn[:, :, :-1]
        gr, nr = tot_g - gl, tot_n - nl
        valid = (nl >= min_leaf) & (nr >= min_leaf)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = gl * gl / nl + gr * gr / nr - tot_g * tot_g / tot_n
        gain = np.where(valid, gain, -np.inf).reshape(width, -1)
        best = np.argmax(gain, axis=1)
        best_gain = gain[np.arange(width), best]
        split_f = np.full(width, -1, dtype=np.int64)
        split_b = np.zeros(width, dtype=np.int64)
        for j in np.flatnonzero(best_gain > MIN_GAIN):
            f, b = divmod(int(best[j]), n_bins - 1)
            split_f[j], split_b[j] = f, b
            feature[lo + j] = f
            threshold[lo + j] = edges[f][b]
        fr = split_f[loc]
        moving = fr >= 0
        if not moving.any():
            break
        r = rows[moving]
        right = B[r, fr[moving]] > split_b[loc[moving]]
        node[r] = 2 * node[r] + 1 + right
    return Tree(feature, threshold, np.zeros(size)), node


def leaf_quantiles(leaf: np.ndarray, u: np.ndarray, tau: float) -> dict[int, float]:
    order = np.lexsort((u, leaf))
    ls, us = leaf[order], u[order]
    ids, start, count = np.unique(ls, return_index=True, return_counts=True)
    return {int(i): float(us[s + upper_rank(c, tau) - 1]) for i, s, c in zip(ids, start, count)}


@dataclass
class QuantileGBT:
    tau: float
    params: GBTParams = field(default_factory=GBTParams)
    base_score: float = 0.0
    trees: list[Tree] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "QuantileGBT":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        prm = self.params
        n_bins = prm.max_bins
        edges = bin_edges(X, n_bins)
        B = apply_bins(X, edges)
        self.base_score = float(np.sort(y)[upper_rank(len(y), self.tau) - 1])
        f = np.full(len(y), self.base_score)
        self.trees = []
        self.train_loss = [float(pinball_loss(y - f, self.tau).mean())]
        for _ in range(prm.n_trees):
            g = pinball_negative_gradient(y, f, self.tau, prm.smoothing)
            tree, leaf = grow_tree(B, g, edges, prm.max_depth, prm.min_leaf, n_bins)
            for i, q in leaf_quantiles(leaf, y - f, self.tau).items():
                tree.value[i] = prm.learn_rate * q
            f = f + tree.value[leaf]
            self.trees.append(tree)
            self.train_loss.append(float(pinball_loss(y - f, self.tau).mean()))
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(len(X), self.base_score)
        for tree in self.trees:
            out += tree.predict(X)
        return out
