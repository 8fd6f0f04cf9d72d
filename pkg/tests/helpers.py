"""Shared oracles for the test suite."""

import numpy as np

from trafficbench import autodiff as ad
from trafficbench import forest

FD_STEP = 1e-5


def perturb_params(model, rng):
    """Move parameters away from their symmetric initial values."""
    for name, v in model.params.items():
        if name == "a":
            model.params[name] = v * (1.0 + 0.3 * rng.random(v.shape))
        else:
            model.params[name] = v + 0.3 * rng.standard_normal(v.shape)


def gradient_check(model, inputs, targets, step=FD_STEP):
    """Largest per-tensor relative error ||g - fd|| / max(||g||, ||fd||)
    between the analytic gradient and central differences of the loss."""
    _, loss = model.graph(inputs.shape[1])
    bindings = model.bindings(inputs, targets)
    ad.evaluate(loss, bindings)
    grads = ad.backward(loss)
    worst = 0.0
    for name, v in model.params.items():
        fd = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            orig = v[i]
            v[i] = orig + step
            up = float(ad.evaluate(loss, bindings))
            v[i] = orig - step
            down = float(ad.evaluate(loss, bindings))
            v[i] = orig
            fd[i] = (up - down) / (2 * step)
        if name == "a":
            # entries outside the neighborhood mask have no effect by design
            fd = fd * model.mask
        g = grads[name]
        den = max(np.linalg.norm(fd), np.linalg.norm(g))
        if den > 0:
            worst = max(worst, np.linalg.norm(fd - g) / den)
    return worst


def _sse(y):
    return float(np.sum((y - y.mean()) ** 2)) if len(y) else 0.0


def oracle_tree(X, y, max_depth, min_leaf=1, depth=0):
    """Exhaustive split enumeration, returned as a nested tuple.

    Leaves are ("leaf", mean); splits are ("split", feature, threshold, left, right).
    Ties in gain go to the lowest feature, then the lowest threshold.
    """
    if depth >= max_depth or np.all(y == y[0]) or len(y) < 2 * min_leaf:
        return ("leaf", float(np.mean(y)))
    parent = _sse(y)
    cands = []
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        for a, b in zip(vals[:-1], vals[1:]):
            thr = (a + b) / 2.0
            go = X[:, j] <= thr
            if go.sum() < min_leaf or (~go).sum() < min_leaf:
                continue
            cands.append((parent - _sse(y[go]) - _sse(y[~go]), j, thr))
    if not cands:
        return ("leaf", float(np.mean(y)))
    best = max(c[0] for c in cands)
    tol = forest.TIE_RTOL * max(parent, abs(best))
    _, j, thr = next(c for c in cands if c[0] >= best - tol)
    go = X[:, j] <= thr
    return (
        "split", j, float(thr),
        oracle_tree(X[go], y[go], max_depth, min_leaf, depth + 1),
        oracle_tree(X[~go], y[~go], max_depth, min_leaf, depth + 1),
    )


def tree_as_tuple(tree, node=0):
    if tree.feature[node] < 0:
        return ("leaf", float(tree.value[node]))
    return (
        "split", int(tree.feature[node]), float(tree.threshold[node]),
        tree_as_tuple(tree, tree.left[node]),
        tree_as_tuple(tree, tree.right[node]),
    )


def trees_equal(a, b, rtol=0.0):
    """Structural equality; leaf means may differ by ``rtol`` (summation order)."""
    if a[0] != b[0]:
        return False
    if a[0] == "leaf":
        return a[1] == b[1] or abs(a[1] - b[1]) <= rtol * max(abs(a[1]), abs(b[1]))
    return a[1] == b[1] and a[2] == b[2] and trees_equal(a[3], b[3], rtol) and trees_equal(a[4], b[4], rtol)
