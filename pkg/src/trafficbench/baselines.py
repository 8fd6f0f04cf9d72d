"""Historical-average and least-squares autoregressive-integrated baselines."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

RIDGE = 1e-8


class NotApplicable(Exception):
    """The baseline has no usable history (e.g. single-day data)."""


def historical_average(history, t, node, period, feature=0):
    """Mean of all observations at ``t - k * period`` (k >= 1) for ``node``."""
    values = getattr(history, "values", history)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        values = values[:, :, feature]
    if values.ndim == 1:
        values = values[:, None]
    prior = np.arange(t - period, -1, -period)
    prior = prior[prior < len(values)]
    if period <= 0 or len(prior) == 0:
        raise NotApplicable(f"no prior week at slot {t % period if period > 0 else t} for node {node}")
    return float(np.mean(values[prior, node]))


def historical_average_windows(values, starts, p, H, period):
    """Vectorized historical average for window targets; returns (S, H, N)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        values = values[:, :, 0]
    out = np.zeros((len(starts), H, values.shape[1]))
    for s_i, s in enumerate(starts):
        for j in range(H):
            t = s + p + j
            prior = np.arange(t - period, -1, -period)
            if len(prior) == 0:
                raise NotApplicable(f"no prior week for time index {t}")
            out[s_i, j] = values[prior].mean(axis=0)
    return out


@dataclass
class ARIModel:
    p: int
    dff: int
    coef: np.ndarray  # (p,), lag 1 first
    intercept: float

    @property
    def param_count(self):
        return self.p + 1


def difference(x, dff):
    for _ in range(dff):
        x = np.diff(x)
    return x


def fit_ari(series, p, dff=0):
    """Difference ``dff`` times, then fit AR(p) with intercept by least squares.

    Singular or badly conditioned normal equations fall back to a ridge
    penalty on the lag coefficients.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    if dff not in (0, 1, 2):
        raise ValueError("differencing degree must be 0, 1 or 2")
    if p < 1:
        raise ValueError("AR order must be >= 1")
    if len(x) <= p + dff:
        raise ValueError(f"series of length {len(x)} too short for p={p}, dff={dff}")
    w = difference(x, dff)
    rows = len(w) - p
    lags = np.stack([w[p - j - 1 : p - j - 1 + rows] for j in range(p)], axis=1)
    design = np.hstack([np.ones((rows, 1)), lags])
    target = w[p:]
    gram = design.T @ design
    rhs = design.T @ target
    try:
        if np.linalg.cond(gram) > 1e12:
            raise np.linalg.LinAlgError("ill-conditioned")
        beta = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError:
        log.warning("singular normal equations for AR(%d); using ridge %.0e", p, RIDGE)
        pen = RIDGE * np.eye(p + 1)
        pen[0, 0] = 0.0
        beta = np.linalg.solve(gram + pen, rhs)
    return ARIModel(p, dff, beta[1:], float(beta[0]))


def predict_ari(model, history, H):
    """Recursive H-step forecast from the tail of ``history``."""
    x = np.asarray(history, dtype=np.float64).ravel()
    if H == 0:
        return np.zeros(0)
    need = model.p + model.dff
    if len(x) < need:
        raise ValueError(f"need at least {need} history points, got {len(x)}")
    # last value of each differencing level, used to re-integrate
    levels = []
    cur = x
    for _ in range(model.dff):
        levels.append(cur[-1])
        cur = np.diff(cur)
    w = list(cur[-model.p :])
    out = []
    for _ in range(H):
        nxt = model.intercept + float(np.dot(model.coef, w[::-1][: model.p]))
        w.append(nxt)
        val = nxt
        for lvl in reversed(range(model.dff)):
            val = levels[lvl] + val
            levels[lvl] = val
        out.append(val)
    return np.asarray(out)


def ari_insample_residuals(model, series):
    """One-step in-sample residuals on the differenced scale."""
    w = difference(np.asarray(series, dtype=np.float64), model.dff)
    rows = len(w) - model.p
    lags = np.stack([w[model.p - j - 1 : model.p - j - 1 + rows] for j in range(model.p)], axis=1)
    return w[model.p :] - (model.intercept + lags @ model.coef)
