"""Sequence-to-horizon forecasters on top of the graph-recurrent cells."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import cells
from .data import Scaler
from .graph import ROW, SYMMETRIC, aggregation_matrix, neighborhood_mask

log = logging.getLogger(__name__)

NEURAL_PRESETS = ["GRU", "GCN"] + cells.TABLE_ORDER


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, last_finite_epoch):
        super().__init__(msg)
        self.last_finite_epoch = last_finite_epoch


@dataclass
class TrainConfig:
    lr: float = 1e-3
    l2: float = 0.0
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    patience: int = 100
    target_mae: float | None = None  # stop once validation MAE reaches this

    def to_dict(self):
        return asdict(self)


@dataclass
class ForecastModel:
    preset: str
    n_nodes: int
    input_dim: int
    hidden_dim: int
    window: int
    horizon: int
    spec: cells.CellSpec | None
    agg: np.ndarray
    mask: np.ndarray
    params: dict
    scaler: Scaler
    seed: int = 0
    _graphs: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def independent_readout(self):
        return self.spec is not None and self.spec.weight_mode == cells.INDEPENDENT

    def readout_shapes(self):
        h, H, n = self.hidden_dim, self.horizon, self.n_nodes
        if self.independent_readout:
            return {"out_W": (n, h, H), "out_b": (n, H)}
        return {"out_W": (h, H), "out_b": (H,)}

    def param_shapes(self):
        if self.spec is None:
            shapes = {"gcn_W": (self.window * self.input_dim, self.hidden_dim), "gcn_b": (self.hidden_dim,)}
        else:
            shapes = cells.param_shapes(self.spec)
        shapes.update(self.readout_shapes())
        return shapes

    def param_count(self):
        if self.spec is None:
            return sum(math.prod(s) for s in self.param_shapes().values())
        readout = sum(math.prod(s) for s in self.readout_shapes().values())
        return cells.param_count(self.spec, self.mask) + readout

    # graph construction --------------------------------------------------

    def graph(self, p=None):
        """(prediction, loss) expressions for window length ``p``, built once."""
        p = p or self.window
        if p in self._graphs:
            return self._graphs[p]
        leaves = cells.param_leaves(self.param_shapes())
        xs = [ad.input(f"x{t}") for t in range(p)]
        if self.spec is None:
            if p != self.window:
                raise ValueError("GCN forecaster needs exactly the configured window length")
            feats = ad.concat(xs, axis=-1)
            hidden = cells.gcn_expr(feats, ad.const(self.agg), leaves["gcn_W"], leaves["gcn_b"], "relu")
        else:
            builder = cells.StepBuilder(self.spec, leaves, self.agg, self.mask)
            hidden = ad.const(np.zeros((1, self.n_nodes, self.hidden_dim)))
            for x in xs:
                hidden = builder.step(x, hidden)
        if self.independent_readout:
            out = ad.einsum("bnh,nhk->bnk", hidden, leaves["out_W"]) + leaves["out_b"]
        else:
            out = hidden @ leaves["out_W"] + leaves["out_b"]
        y = ad.input("y")
        loss = ad.mean(ad.square(out - y))
        self._graphs[p] = (out, loss)
        return out, loss

    def bindings(self, inputs, targets=None):
        """``inputs`` (B, p, N, d) normalized; ``targets`` (B, H, N) normalized."""
        b = dict(self.params)
        for t in range(inputs.shape[1]):
            b[f"x{t}"] = inputs[:, t]
        if targets is not None:
            b["y"] = np.swapaxes(targets, 1, 2)
        return b

    def predict_normalized(self, inputs, chunk=512):
        inputs = np.asarray(inputs, dtype=np.float64)
        out, _ = self.graph(inputs.shape[1])
        parts = []
        for s in range(0, len(inputs), chunk):
            parts.append(np.swapaxes(ad.evaluate(out, self.bindings(inputs[s : s + chunk])), 1, 2))
        if not parts:
            return np.zeros((0, self.horizon, self.n_nodes))
        return np.concatenate(parts)

    def predict(self, inputs):
        """Denormalized (S, H, N) predictions for normalized inputs (S, p, N, d)."""
        return self.scaler.denormalize_target(self.predict_normalized(inputs))

    # persistence ---------------------------------------------------------

    def save(self, path):
        meta = {
            "preset": self.preset,
            "n_nodes": self.n_nodes,
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "window": self.window,
            "horizon": self.horizon,
            "spec": None if self.spec is None else self.spec.to_dict(),
            "scaler": self.scaler.to_dict(),
            "seed": self.seed,
        }
        tensors = dict(self.params)
        tensors["_agg"] = self.agg
        tensors["_mask"] = self.mask.astype(float)
        cells.write_checkpoint(path, meta, tensors)

    @classmethod
    def load(cls, path):
        meta, tensors = cells.read_checkpoint(path)
        agg = tensors.pop("_agg")
        mask = tensors.pop("_mask").astype(bool)
        spec = None if meta["spec"] is None else cells.CellSpec(**meta["spec"])
        return cls(
            meta["preset"], meta["n_nodes"], meta["input_dim"], meta["hidden_dim"], meta["window"],
            meta["horizon"], spec, agg, mask, tensors, Scaler.from_dict(meta["scaler"]), meta["seed"],
        )


def build_model(preset, g, input_dim=1, hidden_dim=32, window=12, horizon=12, k=1, seed=0,
                scaler=None, embed_dim=4, undirected=False, **spec_kw):
    """Construct a forecaster from a preset name and a road graph."""
    n = g.n
    scaler = scaler or Scaler(np.zeros(input_dim), np.ones(input_dim))
    if isinstance(preset, cells.CellSpec):
        spec, name = preset, "custom"
        agg = aggregation_matrix(g, spec.k, ROW, undirected)
        mask = neighborhood_mask(g, spec.k, undirected)
    elif (name := cells.canonical_name(preset)) == "GCN":
        agg = aggregation_matrix(g, k, SYMMETRIC)
        mask = neighborhood_mask(g, k, undirected=True)
        spec = None
    elif name in cells.PRESETS:
        spec = cells.make_spec(name, input_dim, hidden_dim, n, k=k, embed_dim=embed_dim, **spec_kw)
        agg = aggregation_matrix(g, k, ROW, undirected)
        mask = neighborhood_mask(g, k, undirected)
    else:
        raise ValueError(f"{preset!r} is not a neural preset")
    model = ForecastModel(name, n, input_dim, hidden_dim, window, horizon, spec, agg, mask, {}, scaler, seed)
    model.params = init_model_params(model, seed)
    return model


def init_model_params(model, seed):
    rng = np.random.default_rng([seed, 1])
    if model.spec is None:
        params = {}
        fan = model.window * model.input_dim
        params["gcn_W"] = rng.uniform(-1, 1, size=(fan, model.hidden_dim)) / math.sqrt(fan)
        params["gcn_b"] = np.zeros(model.hidden_dim)
    else:
        params = cells.init_params(model.spec, seed, model.mask)
    for name, shape in model.readout_shapes().items():
        if name == "out_b":
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(model.hidden_dim)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def forward(model, window):
    """(p, N, d) normalized window -> (H, N) denormalized predictions."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 3 or window.shape[1:] != (model.n_nodes, model.input_dim) or window.shape[0] < 1:
        raise ValueError(f"window shape {window.shape} does not match (p, {model.n_nodes}, {model.input_dim})")
    return model.predict(window[None])[0]


def loss(preds, targets):
    """Mean squared error over all (node, step) pairs."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {targets.shape}")
    return float(np.mean((preds - targets) ** 2))


@dataclass
class TrainResult:
    model: ForecastModel
    curve: list  # (epoch, train_loss, val_mae)
    best_val_mae: float
    best_epoch: int

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_mae"])
            for row in self.curve:
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def _mae_raw(model, windows):
    pred = model.predict_normalized(windows.inputs)
    return float(np.mean(np.abs(pred - windows.targets)) * model.scaler.std[0])


def train(model, train_w, val_w=None, cfg=None):
    """Mini-batch training on normalized windows; keeps the best-validation snapshot."""
    cfg = cfg or TrainConfig()
    if len(train_w) == 0:
        raise ValueError("training set is empty")
    if val_w is None or len(val_w) == 0:
        val_w = train_w
    rng = np.random.default_rng(cfg.seed)
    opt = ad.Adam(cfg.lr, cfg.l2)
    _, loss_expr = model.graph(train_w.inputs.shape[1])
    best, best_epoch = math.inf, 0
    best_params = copy.deepcopy(model.params)
    curve, wait = [], 0
    S = len(train_w)
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(S)
        total = 0.0
        for s in range(0, S, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            value = ad.evaluate(loss_expr, model.bindings(train_w.inputs[idx], train_w.targets[idx]))
            value = float(value)
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", epoch - 1)
            grads = ad.backward(loss_expr)
            try:
                opt.step(model.params, grads)
            except ad.NonFiniteGradient as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch}", epoch - 1) from None
            total += value * len(idx)
        val_mae = _mae_raw(model, val_w)
        if not math.isfinite(val_mae):
            raise TrainingDiverged(f"non-finite validation error at epoch {epoch}", epoch - 1)
        curve.append((epoch, total / S, val_mae))
        if val_mae < best:
            best, best_epoch, wait = val_mae, epoch, 0
            best_params = copy.deepcopy(model.params)
        else:
            wait += 1
            if wait >= cfg.patience:
                break
        if cfg.target_mae is not None and best <= cfg.target_mae:
            break
    model.params = best_params
    return TrainResult(model, curve, best, best_epoch)


def param_norm(params):
    return math.sqrt(sum(float(np.sum(v * v)) for v in params.values()))
