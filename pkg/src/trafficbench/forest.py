"""CART regression trees and bagged forests over neighborhood lag features."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .graph import k_hop_neighborhood

# Relative tolerance under which two variance reductions count as tied.
TIE_RTOL = 1e-10


@dataclass
class RegressionTree:
    """Array-encoded tree.  Node 0 is the root; leaves have ``feature == -1``.

    Samples with ``x[feature] <= threshold`` go left.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    max_depth: int
    n_features: int

    @property
    def node_count(self):
        return len(self.feature)

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        node = np.zeros(len(X), dtype=int)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            cur = node[idx]
            go_left = X[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] >= 0
        return self.value[node]

    def depth(self):
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))

        return rec(0)

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
            "max_depth": self.max_depth,
            "n_features": self.n_features,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.asarray(d["feature"], dtype=int),
            np.asarray(d["threshold"], dtype=float),
            np.asarray(d["left"], dtype=int),
            np.asarray(d["right"], dtype=int),
            np.asarray(d["value"], dtype=float),
            np.asarray(d["n_samples"], dtype=int),
            d["max_depth"],
            d["n_features"],
        )


def _best_split(X, y, min_leaf):
    """Vectorized search over every feature and every midpoint between
    consecutive distinct sorted values.  Returns (feature, threshold, gain)
    or None; ties go to the lowest feature, then the lowest threshold."""
    n, F = X.shape
    if n < 2 * min_leaf:
        return None
    yc = y - y.mean()
    parent = float(np.dot(yc, yc))
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    ys = yc[order]
    cs = np.cumsum(ys, axis=0)[:-1]
    cs2 = np.cumsum(ys * ys, axis=0)[:-1]
    nl = np.arange(1, n)[:, None]
    nr = n - nl
    tot, tot2 = cs[-1] + ys[-1], cs2[-1] + ys[-1] ** 2
    sse_l = cs2 - cs * cs / nl
    sse_r = (tot2 - cs2) - (tot - cs) ** 2 / nr
    gain = parent - sse_l - sse_r
    valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
    if not valid.any():
        return None
    gain = np.where(valid, gain, -np.inf)
    best = gain.max()
    tol = TIE_RTOL * max(parent, abs(best))
    pos, feat = np.nonzero(gain >= best - tol)
    # lowest feature first, then lowest threshold (positions are sorted by value)
    j = int(feat.min())
    i = int(pos[feat == j].min())
    thr = (xs[i, j] + xs[i + 1, j]) / 2.0
    return j, float(thr), float(gain[i, j])


def fit_tree(X, y, max_depth, min_leaf=1, rng=None):
    """Greedy variance-reduction CART.  ``rng`` is accepted for API symmetry;
    every feature is searched at every node, so fitting is deterministic."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("need a 2-D X with one target per row and at least one sample")
    feature, threshold, left, right, value, count = [], [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(np.mean(y[idx])))
        count.append(len(idx))
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        ys = y[idx]
        if depth >= max_depth or np.all(ys == ys[0]):
            continue
        split = _best_split(X[idx], ys, min_leaf)
        if split is None:
            continue
        j, thr, _ = split
        go_left = X[idx, j] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = j, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return RegressionTree(
        np.asarray(feature, dtype=int),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=int),
        np.asarray(right, dtype=int),
        np.asarray(value, dtype=float),
        np.asarray(count, dtype=int),
        int(max_depth),
        X.shape[1],
    )


@dataclass
class Forest:
    trees: list
    bootstrap: bool
    seed: int
    depth: int

    @property
    def node_count(self):
        return sum(t.node_count for t in self.trees)

    def predict(self, X):
        return predict_forest(self, X)

    def to_dict(self):
        return {
            "bootstrap": self.bootstrap,
            "seed": self.seed,
            "depth": self.depth,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([RegressionTree.from_dict(t) for t in d["trees"]], d["bootstrap"], d["seed"], d["depth"])


def fit_forest(X, y, B=100, depth=10, bootstrap=True, seed=0, min_leaf=1):
    if B < 1:
        raise ValueError("a forest needs at least one tree")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    streams = np.random.SeedSequence(seed).spawn(B)
    trees = []
    full = None
    for s in streams:
        if bootstrap:
            rng = np.random.default_rng(s)
            idx = rng.integers(0, len(y), size=len(y))
            trees.append(fit_tree(X[idx], y[idx], depth, min_leaf))
        else:
            if full is None:
                full = fit_tree(X, y, depth, min_leaf)
            trees.append(full)
    return Forest(trees, bootstrap, seed, depth)


def predict_forest(forest, X):
    X = np.asarray(X, dtype=np.float64)
    return np.mean([t.predict(X) for t in forest.trees], axis=0)


def save_forests(path, forests, meta=None):
    """Self-describing JSON: ``forests`` maps "node:step" keys to Forest."""
    doc = {"meta": meta or {}, "forests": {k: f.to_dict() for k, f in forests.items()}}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_forests(path):
    with open(path) as fh:
        doc = json.load(fh)
    return doc["meta"], {k: Forest.from_dict(f) for k, f in doc["forests"].items()}


# ---------------------------------------------------------------------------
# regression framing


@dataclass
class FeatureMatrix:
    X: np.ndarray
    columns: list  # (node, lag, feature) per column
    starts: np.ndarray  # window start index per row


def build_features(values, g, i, k, p, H, span=None, breaks=(), undirected=False):
    """Lagged neighborhood regressors and the next H values of node ``i``.

    Columns are ordered by neighbor id, then lag (0 = most recent), then
    feature.  Returns (FeatureMatrix, targets of shape (rows, H)).
    """
    breaks = getattr(values, "breaks", breaks)
    values = getattr(values, "values", values)
    values = np.asarray(values, dtype=np.float64)
    T, N, d = values.shape
    span = range(0, T) if span is None else span
    if len(span) < p + H:
        raise ValueError(f"window p+H={p + H} longer than the series span {len(span)}")
    members = sorted(k_hop_neighborhood(g, i, k, undirected).members)
    L = p + H
    starts = np.array(
        [s for s in range(span.start, span.stop - L + 1) if not any(s < b < s + L for b in breaks)],
        dtype=int,
    )
    cols, blocks = [], []
    for n in members:
        for lag in range(p):
            for f in range(d):
                cols.append((n, lag, f))
                blocks.append(values[starts + p - 1 - lag, n, f])
    X = np.stack(blocks, axis=1) if blocks else np.zeros((len(starts), 0))
    Y = np.stack([values[starts + p + j, i, 0] for j in range(H)], axis=1)
    return FeatureMatrix(X, cols, starts), Y
