"""Experiment orchestration: end-to-end runs, coordinate-descent tuning,
parameter accounting and comparison tables."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import baselines, cells, data, forest, forecaster
from .graph import build_graph
from .metrics import CUMULATIVE, HORIZON, MetricReport, compute_metrics

log = logging.getLogger(__name__)

BASELINES = ["GRU", "GCN", "HA", "ARI", "RF"]
REGISTRY = cells.TABLE_ORDER + BASELINES
ROW_ORDER = cells.TABLE_ORDER + BASELINES

DEFAULT_HYPER = {
    "k": 1,
    "window": 12,
    "horizon": 12,
    "hidden": 32,
    "batch_size": 64,
    "lr": 1e-3,
    "l2": 1e-5,
    "epochs": 100,
    "patience": 100,
    "embed_dim": 4,
    "dff": 0,
    "trees": 100,
    "depth": 10,
    "bootstrap": True,
}

TUNE_EPOCH_CAP = 500


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.cause = exc


@dataclass
class ExperimentConfig:
    preset: str
    dataset: str | None = None  # manifest path
    synth: dict | None = None  # generator arguments, used when no manifest is given
    hyper: dict = field(default_factory=dict)
    seed: int = 0
    convention: str | None = None
    eval_horizon: int | None = None
    eval_nodes: list | None = None
    mape_floor: float = 1.0
    out: str = "runs"

    def __post_init__(self):
        self.preset = cells.canonical_name(self.preset)
        if self.preset not in REGISTRY:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {REGISTRY}")
        if (self.dataset is None) == (self.synth is None):
            raise ValueError("give exactly one of 'dataset' or 'synth'")
        unknown = set(self.hyper) - set(DEFAULT_HYPER)
        if unknown:
            raise ValueError(f"unknown hyperparameters {sorted(unknown)}")

    def h(self, key):
        return self.hyper.get(key, DEFAULT_HYPER[key])

    def to_dict(self):
        return {
            "preset": self.preset,
            "dataset": self.dataset,
            "synth": self.synth,
            "hyper": dict(sorted(self.hyper.items())),
            "seed": self.seed,
            "convention": self.convention,
            "eval_horizon": self.eval_horizon,
            "eval_nodes": self.eval_nodes,
            "mape_floor": self.mape_floor,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_hyper(self, **kw):
        new = copy.deepcopy(self)
        new.hyper.update(kw)
        return new


# ---------------------------------------------------------------------------
# data


def graph_from_config(cfg_synth):
    """Edges from an explicit list, or a seeded topology over ``n_nodes``."""
    if "edges" in cfg_synth:
        return build_graph(cfg_synth["edges"], cfg_synth.get("n_nodes"))
    n = int(cfg_synth["n_nodes"])
    topo = cfg_synth.get("topology", "chain")
    if topo == "chain":
        edges = [(i, i + 1) for i in range(n - 1)]
    elif topo == "ring":
        edges = [(i, (i + 1) % n) for i in range(n)]
    elif topo == "random":
        rng = np.random.default_rng(cfg_synth.get("graph_seed", 0))
        edges = [(i, i + 1) for i in range(n - 1)]
        extra = rng.integers(0, n, size=(n, 2))
        edges += [(int(a), int(b)) for a, b in extra if a != b]
        edges = list(dict.fromkeys(edges))
    else:
        raise ValueError(f"unknown topology {topo!r}")
    return build_graph(edges, n)


SYNTH_KEYS = {
    "T", "noise", "demand_range", "seed", "mode", "copy_edges", "events", "event_rate",
    "period", "levels", "runs", "features", "interval_minutes",
}


def synth_from_config(cfg_synth):
    g = graph_from_config(cfg_synth)
    kw = {k: v for k, v in cfg_synth.items() if k in SYNTH_KEYS}
    if "features" in kw:
        kw["features"] = tuple(kw["features"])
    if "copy_edges" in kw:
        kw["copy_edges"] = [tuple(e) for e in kw["copy_edges"]]
    return data.synth_generate(g, **kw), g


def load_data(cfg):
    if cfg.dataset is not None:
        return data.load_dataset(cfg.dataset)
    return synth_from_config(cfg.synth)


def default_convention(series):
    return CUMULATIVE if series.source == "pems" else HORIZON


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentResult:
    report: MetricReport | None
    status: str  # "ok" or "not_applicable"
    run_dir: str | None
    complexity: int | None
    extra: dict = field(default_factory=dict)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (StageError, baselines.NotApplicable):
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(name, exc) from exc


def _predict_neural(cfg, series, g, norm, scaler, train_w, val_w, eval_w, stage):
    hidden = cfg.h("hidden")
    model = forecaster.build_model(
        cfg.preset, g, input_dim=series.shape[2], hidden_dim=hidden, window=cfg.h("window"),
        horizon=cfg.h("horizon"), k=cfg.h("k"), seed=cfg.seed, scaler=scaler, embed_dim=cfg.h("embed_dim"),
    )
    epochs = cfg.h("epochs")
    if stage == "validate":
        epochs = min(epochs, TUNE_EPOCH_CAP)
    tc = forecaster.TrainConfig(
        lr=cfg.h("lr"), l2=cfg.h("l2"), batch_size=cfg.h("batch_size"), epochs=epochs,
        seed=cfg.seed, patience=cfg.h("patience"),
    )
    result = forecaster.train(model, train_w, val_w, tc)
    return model.predict(eval_w.inputs), {"model": model, "train": result}


def _predict_rf(cfg, series, g, train_span, eval_span, nodes):
    p, H = cfg.h("window"), cfg.h("horizon")
    forests, preds = {}, None
    for i in nodes:
        fm_tr, y_tr = forest.build_features(series, g, i, cfg.h("k"), p, H, span=train_span)
        fm_ev, _ = forest.build_features(series, g, i, cfg.h("k"), p, H, span=eval_span)
        if preds is None:
            preds = np.zeros((len(fm_ev.starts), H, series.shape[1]))
        for j in range(H):
            seed = int(np.random.SeedSequence([cfg.seed, i, j]).generate_state(1)[0])
            f = forest.fit_forest(fm_tr.X, y_tr[:, j], cfg.h("trees"), cfg.h("depth"), cfg.h("bootstrap"), seed)
            forests[f"{i}:{j}"] = f
            preds[:, j, i] = f.predict(fm_ev.X)
    return preds, {"forests": forests}


def _predict_ari(cfg, series, train_span, eval_w, nodes):
    p, H, dff = cfg.h("window"), cfg.h("horizon"), cfg.h("dff")
    raw = series.values[:, :, 0]
    preds = np.zeros((len(eval_w), H, series.shape[1]))
    models = {}
    for i in nodes:
        m = baselines.fit_ari(raw[train_span.start : train_span.stop, i], p, dff)
        models[i] = m
        for s_i, s in enumerate(eval_w.starts):
            end = s + p
            hist = raw[max(0, end - (p + dff + 1)) : end, i]
            preds[s_i, :, i] = baselines.predict_ari(m, hist, H)
    return preds, {"ari": models}


def run_experiment(cfg, stage="test", write=True):
    """Load, split, normalize, window, fit and evaluate one configuration.

    ``stage="validate"`` scores on the validation range and never builds
    test windows; ``stage="test"`` trains on train (selecting on validation)
    and scores on test.
    """
    series, g = _stage("load", load_data, cfg)
    split = _stage("split", data.chronological_split, series.shape[0])
    normed, scaler = _stage("normalize", data.zscore, series, split.train)
    p, H = cfg.h("window"), cfg.h("horizon")
    eval_span = split.val if stage == "validate" else split.test
    convention = cfg.convention or default_convention(series)
    eval_h = cfg.eval_horizon or H
    nodes = list(range(series.shape[1])) if cfg.eval_nodes is None else list(cfg.eval_nodes)
    fit_nodes = list(range(series.shape[1]))
    extra = {}

    def windows():
        tr = data.make_windows(normed, split.train, p, H)
        va = data.make_windows(normed, split.val, p, H)
        ev = va if stage == "validate" else data.make_windows(normed, eval_span, p, H)
        if len(tr) == 0 or len(ev) == 0:
            raise ValueError("not enough data for the requested window and horizon")
        return tr, va, ev

    train_w, val_w, eval_w = _stage("window", windows)
    targets = scaler.denormalize_target(eval_w.targets)
    status, preds = "ok", None
    try:
        if cfg.preset in forecaster.NEURAL_PRESETS:
            preds, extra = _stage(
                "train", _predict_neural, cfg, series, g, normed, scaler, train_w, val_w, eval_w, stage
            )
        elif cfg.preset == "RF":
            preds, extra = _stage("fit", _predict_rf, cfg, series, g, split.train, eval_span, fit_nodes)
        elif cfg.preset == "ARI":
            preds, extra = _stage("fit", _predict_ari, cfg, series, split.train, eval_w, fit_nodes)
        elif cfg.preset == "HA":
            period = series.weekly_period or data.MINUTES_PER_WEEK // series.interval_minutes
            preds = baselines.historical_average_windows(series.values, eval_w.starts, p, H, period)
            extra = {"period": period}
    except baselines.NotApplicable as exc:
        status = "not_applicable"
        extra = {"reason": str(exc)}
    report = None
    if status == "ok":
        report = _stage(
            "evaluate", compute_metrics, preds[..., nodes], targets[..., nodes], convention, eval_h, cfg.mape_floor
        )
    complexity = _complexity_from_extra(cfg, series, extra) if status == "ok" else None
    run_dir = None
    if write and stage == "test":
        run_dir = _stage("write", _write_run, cfg, report, status, complexity, extra, preds)
    return ExperimentResult(report, status, run_dir, complexity, extra)


def _complexity_from_extra(cfg, series, extra):
    if "model" in extra:
        return extra["model"].param_count()
    if "forests" in extra:
        return sum(f.node_count for f in extra["forests"].values())
    if "ari" in extra:
        return sum(m.param_count for m in extra["ari"].values())
    if "period" in extra:
        return series.shape[1] * extra["period"]
    return None


def _write_run(cfg, report, status, complexity, extra, preds):
    run_dir = os.path.join(cfg.out, cfg.digest())
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    doc = {"status": status, "preset": cfg.preset, "complexity": complexity}
    if report is not None:
        doc["report"] = report.to_dict()
    else:
        doc["reason"] = extra.get("reason")
    with open(os.path.join(run_dir, "metrics.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    if "model" in extra:
        extra["model"].save(os.path.join(run_dir, "checkpoint.json"))
        extra["train"].write_log(os.path.join(run_dir, "train_log.csv"))
    if "forests" in extra:
        forest.save_forests(os.path.join(run_dir, "forests.json"), extra["forests"], {"seed": cfg.seed})
    if "ari" in extra:
        with open(os.path.join(run_dir, "checkpoint.json"), "w") as fh:
            json.dump(
                {str(i): {"p": m.p, "dff": m.dff, "coef": m.coef.tolist(), "intercept": m.intercept}
                 for i, m in extra["ari"].items()},
                fh, indent=1,
            )
    if preds is not None:
        np.save(os.path.join(run_dir, "predictions.npy"), preds)
    return run_dir


def evaluate_run(run_dir, convention=None, horizon=None):
    """Re-score a stored run's predictions under another convention/horizon."""
    with open(os.path.join(run_dir, "config.json")) as fh:
        cfg = ExperimentConfig.from_dict(json.load(fh))
    preds_path = os.path.join(run_dir, "predictions.npy")
    if not os.path.exists(preds_path):
        raise baselines.NotApplicable("run has no predictions")
    preds = np.load(preds_path)
    series, _ = load_data(cfg)
    split = data.chronological_split(series.shape[0])
    test_w = data.make_windows(series, split.test, cfg.h("window"), cfg.h("horizon"))
    nodes = list(range(series.shape[1])) if cfg.eval_nodes is None else list(cfg.eval_nodes)
    conv = convention or cfg.convention or default_convention(series)
    H = horizon or cfg.eval_horizon or cfg.h("horizon")
    return compute_metrics(preds[..., nodes], test_w.targets[..., nodes], conv, H, cfg.mape_floor)


# ---------------------------------------------------------------------------
# coordinate-descent tuning


@dataclass
class GridSpec:
    coords: list  # [(name, [values...]), ...] in tuning order

    def __post_init__(self):
        for name, values in self.coords:
            if not values:
                raise ValueError(f"grid coordinate {name!r} has no values")

    @property
    def names(self):
        return [n for n, _ in self.coords]


def default_grid(preset, simulation=True):
    """Tuning grid rows applicable to ``preset``."""
    preset = cells.canonical_name(preset)
    rows = []
    if preset != "ARI" and preset != "HA":
        rows.append(("k", [1, 2, 3, 4, 5, 6]))
    if preset != "HA":
        rows.append(("window", list(range(2, 10)) if simulation else [12]))
    if preset in forecaster.NEURAL_PRESETS:
        rows += [
            ("hidden", [32, 64, 128]),
            ("batch_size", [32, 64, 128]),
            ("lr", [1e-5, 1e-4, 1e-3]),
            ("l2", [1e-5, 1e-4, 1e-3]),
            ("epochs", list(range(50, 2001, 50))),
        ]
    if preset == "ARI":
        rows.append(("dff", [0, 1, 2]))
    if preset == "RF":
        rows += [("trees", [100, 150, 200]), ("depth", [5, 10, 15, 20])]
    return GridSpec(rows)


@dataclass
class TuneResult:
    best: dict
    score: float
    trace: list  # (cycle, coordinate, value, score)
    cache: dict  # frozen config -> score
    cycles: int


def _key(point):
    return tuple(sorted(point.items()))


def coordinate_descent(objective, grid, start=None, max_cycles=5):
    """Cycle coordinates in grid order, moving each to its best value with the
    others fixed (ties keep the smaller value).  Stops after a full cycle
    without change or ``max_cycles`` cycles.  Failing points score +inf."""
    if not grid.coords:
        raise ValueError("empty tuning grid")
    point = {name: values[0] for name, values in grid.coords}
    if start:
        point.update({k: v for k, v in start.items() if k in point})
    cache, trace = {}, []

    def score(pt):
        key = _key(pt)
        if key not in cache:
            try:
                val = float(objective(dict(pt)))
            except Exception as exc:  # noqa: BLE001 - scored as a failed grid point
                log.warning("grid point %s failed: %s", pt, exc)
                val = math.inf
            cache[key] = val if math.isfinite(val) else math.inf
        return cache[key]

    cycles = 0
    for cycles in range(1, max_cycles + 1):
        changed = False
        for name, values in grid.coords:
            best_v, best_s = point[name], score(point)
            for v in sorted(values):
                trial = dict(point, **{name: v})
                s = score(trial)
                trace.append((cycles, name, v, s))
                if s < best_s or (s == best_s and v < best_v):
                    best_v, best_s = v, s
            if best_v != point[name]:
                point[name] = best_v
                changed = True
        if not changed:
            break
    return TuneResult(dict(point), score(point), trace, cache, cycles)


def tune(cfg, grid=None, start=None, max_cycles=5, objective=None):
    """Tune ``cfg``'s preset on validation MAE; never touches the test range."""
    if grid is None:
        series, _ = load_data(cfg)
        grid = default_grid(cfg.preset, simulation=series.source != "pems")

    def validation_mae(point):
        res = run_experiment(cfg.with_hyper(**point), stage="validate", write=False)
        if res.status != "ok":
            return math.inf
        return res.report.mae

    return coordinate_descent(objective or validation_mae, grid, start, max_cycles)


# ---------------------------------------------------------------------------
# complexity


def count_params(cfg, n_nodes=None, input_dim=1, mask_graph=None):
    """Trainable scalars (neural), stored slot means (HA), AR coefficients
    (ARI) or total tree nodes (RF, requires fitting)."""
    if cfg.preset in forecaster.NEURAL_PRESETS:
        g = mask_graph
        if g is None:
            _, g = load_data(cfg)
        model = forecaster.build_model(
            cfg.preset, g, input_dim=input_dim, hidden_dim=cfg.h("hidden"), window=cfg.h("window"),
            horizon=cfg.h("horizon"), k=cfg.h("k"), seed=cfg.seed, embed_dim=cfg.h("embed_dim"),
        )
        return model.param_count()
    res = run_experiment(cfg, write=False)
    return res.complexity


def complexity_table(cfg, presets=None):
    rows = []
    for name in presets or ROW_ORDER:
        c = copy.deepcopy(cfg)
        c.preset = name
        try:
            rows.append((name, count_params(c)))
        except StageError as exc:
            rows.append((name, None))
            log.warning("complexity for %s failed: %s", name, exc)
    return rows


# ---------------------------------------------------------------------------
# comparison tables

METRIC_KEYS = (("MAE", "mae"), ("MAPE", "mape_percent"), ("RMSE", "rmse"))


@dataclass
class ComparisonTable:
    rows: list  # preset names
    columns: list  # e.g. "MAE@3"
    values: dict  # (row, col) -> float or None
    best: set
    second: set

    def to_markdown(self):
        lines = ["| Model | " + " | ".join(self.columns) + " |", "|---" * (len(self.columns) + 1) + "|"]
        for r in self.rows:
            cells_ = []
            for c in self.columns:
                v = self.values.get((r, c))
                if v is None:
                    cells_.append("Not applicable")
                    continue
                txt = f"{v:.4f}"
                if (r, c) in self.best:
                    txt = f"**{txt}**"
                elif (r, c) in self.second:
                    txt = f"<u>{txt}</u>"
                cells_.append(txt)
            lines.append(f"| {r} | " + " | ".join(cells_) + " |")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {
            "columns": self.columns,
            "rows": [
                {
                    "model": r,
                    "values": {c: self.values.get((r, c)) for c in self.columns},
                    "best": [c for c in self.columns if (r, c) in self.best],
                    "second": [c for c in self.columns if (r, c) in self.second],
                }
                for r in self.rows
            ],
        }


def rank_markers(column):
    """Competition ranking on a {row: value} column: rank-1 rows are best,
    rank-2 rows second.  A tie for the minimum leaves no second place."""
    vals = {r: v for r, v in column.items() if v is not None}
    if not vals:
        return set(), set()
    lo = min(vals.values())
    best = {r for r, v in vals.items() if v == lo}
    if len(best) > 1:
        return best, set()
    rest = [v for v in vals.values() if v != lo]
    if not rest:
        return best, set()
    lo2 = min(rest)
    return best, {r for r, v in vals.items() if v == lo2}


def compare(run_dirs):
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two runs")
    runs = []
    for d in run_dirs:
        with open(os.path.join(d, "config.json")) as fh:
            cfg = json.load(fh)
        with open(os.path.join(d, "metrics.json")) as fh:
            met = json.load(fh)
        runs.append((cfg, met))
    datasets = {json.dumps([c["dataset"], c["synth"]], sort_keys=True) for c, _ in runs}
    if len(datasets) > 1:
        raise ValueError("runs use different datasets")
    conventions = {m["report"]["convention"] for _, m in runs if m.get("report")}
    if len(conventions) > 1:
        raise ValueError(f"runs use different conventions: {sorted(conventions)}")
    horizons = sorted({m["report"]["horizon"] for _, m in runs if m.get("report")})
    columns = [f"{label}@{h}" for h in horizons for label, _ in METRIC_KEYS]
    values = {}
    present = []
    for cfg, met in runs:
        row = cfg["preset"]
        if row not in present:
            present.append(row)
        rep = met.get("report")
        if rep is None:
            continue
        for label, key in METRIC_KEYS:
            values[(row, f"{label}@{rep['horizon']}")] = rep[key]
    order = {name: i for i, name in enumerate(ROW_ORDER)}
    rows = sorted(present, key=lambda r: order.get(r, len(order)))
    best, second = set(), set()
    for c in columns:
        b, s = rank_markers({r: values.get((r, c)) for r in rows})
        best |= {(r, c) for r in b}
        second |= {(r, c) for r in s}
    return ComparisonTable(rows, columns, values, best, second)
