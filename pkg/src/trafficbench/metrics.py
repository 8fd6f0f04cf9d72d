"""MAE, MAPE and RMSE under horizon-only and cumulative conventions."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

HORIZON = "horizon"
CUMULATIVE = "cumulative"


@dataclass(frozen=True)
class MetricReport:
    mae: float
    mape_percent: float | None  # None when every target is masked
    rmse: float
    convention: str
    horizon: int
    masked: int
    count: int

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def select_steps(arr, convention, H):
    """Keep step H only (horizon) or steps 1..H (cumulative) along axis -2."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if not 1 <= H <= arr.shape[-2]:
        raise ValueError(f"horizon {H} outside 1..{arr.shape[-2]}")
    if convention == HORIZON:
        return arr[..., H - 1 : H, :]
    if convention == CUMULATIVE:
        return arr[..., :H, :]
    raise ValueError(f"unknown convention {convention!r}")


def compute_metrics(preds, targets, convention=CUMULATIVE, H=None, mape_floor=1.0):
    """Metrics over arrays shaped (..., H, N).

    MAPE skips targets with ``|x| < mape_floor`` and reports how many were
    skipped; if all are skipped it is ``None``.
    """
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"prediction shape {preds.shape} != target shape {targets.shape}")
    if preds.ndim == 1:
        preds, targets = preds[:, None], targets[:, None]
    if H is None:
        H = preds.shape[-2]
    p = select_steps(preds, convention, H)
    x = select_steps(targets, convention, H)
    err = x - p
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err * err)))
    keep = np.abs(x) >= mape_floor
    masked = int(keep.size - keep.sum())
    mape = float(np.mean(np.abs(err[keep] / x[keep])) * 100.0) if keep.any() else None
    return MetricReport(mae, mape, rmse, convention, int(H), masked, int(err.size))
