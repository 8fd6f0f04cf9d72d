"""Series tensors, synthetic traffic, ingestion, splits, windows and scaling."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from datetime import datetime

import numpy as np

from .graph import build_graph, read_edges_csv, write_edges_csv

log = logging.getLogger(__name__)

MINUTES_PER_DAY = 1440
MINUTES_PER_WEEK = 7 * MINUTES_PER_DAY
MAX_GAP = 3


@dataclass
class SeriesTensor:
    values: np.ndarray  # (T, N, d)
    features: tuple = ("speed",)
    interval_minutes: int = 5
    weekly_period: int | None = None
    source: str = "synthetic"
    name: str = "series"
    breaks: tuple = ()  # indices where an independent segment starts
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"series values must be (T, N, d), got {self.values.shape}")
        if len(self.features) != self.values.shape[2]:
            raise ValueError("feature names do not match the feature axis")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("series contains missing or non-finite values")

    @property
    def shape(self):
        return self.values.shape

    @property
    def slots_per_day(self):
        return MINUTES_PER_DAY // self.interval_minutes


# ---------------------------------------------------------------------------
# synthetic generator


def synth_generate(
    g,
    T,
    noise=0.0,
    demand_range=(0.5, 1.5),
    seed=0,
    mode="congestion",
    copy_edges=None,
    events=None,
    event_rate=0.02,
    period=None,
    levels=8,
    runs=1,
    features=("speed",),
    interval_minutes=1,
    temporal_decay=0.85,
    spatial_decay=0.8,
):
    """Lightweight traffic simulator.

    ``congestion`` mode: each node has a free-flow speed shaped by a smooth
    demand profile; congestion events (random, or explicit ``(t, node,
    severity)`` triples) depress speed by a severity factor that decays in
    time and spreads to predecessors one hop per step.

    ``delayed_copy`` mode: for each ``(u, v)`` in ``copy_edges``, node ``v`` at
    time t equals the observed value of ``u`` at t-1 plus fresh noise; other
    nodes draw i.i.d. speed levels from a finite set.

    Each of the ``runs`` draws its own demand scalar; runs are concatenated
    with segment breaks so no window spans two runs.
    """
    if T < 1 or runs < 1:
        raise ValueError("T and runs must be positive")
    for name in features:
        if name not in ("speed", "flow"):
            raise ValueError(f"unknown feature {name!r}")
    ss = np.random.SeedSequence(seed)
    structure_seq, *run_seqs = ss.spawn(runs + 1)
    srng = np.random.default_rng(structure_seq)
    n = g.n
    freeflow = srng.uniform(60.0, 100.0, size=n)
    phase = srng.uniform(-0.05, 0.05, size=n)
    capacity = srng.uniform(1200.0, 2000.0, size=n)
    period = period or max(T, 2)
    chunks, meta_runs = [], []
    for seq in run_seqs:
        drng, nrng = [np.random.default_rng(s) for s in seq.spawn(2)]
        demand = drng.uniform(*demand_range)
        t = np.arange(T)[:, None]
        profile = 0.5 * (1.0 - np.cos(2 * np.pi * (t / period + phase[None, :])))
        if mode == "congestion":
            sev = _congestion(g, T, demand, drng, events, event_rate, temporal_decay, spatial_decay)
            speed = freeflow * (1.0 - 0.3 * demand * profile) * (1.0 - sev)
            flow = capacity * np.clip(demand * (0.4 + 0.5 * profile), 0, 1.2) * (1.0 - 0.5 * sev)
            obs = {"speed": speed, "flow": flow}
            out = np.stack([obs[f] for f in features], axis=-1)
            out = out + noise * nrng.standard_normal(out.shape)
        elif mode == "delayed_copy":
            out = _delayed_copy(n, T, freeflow, capacity, demand, drng, nrng, noise, copy_edges, levels, features)
        else:
            raise ValueError(f"unknown generator mode {mode!r}")
        chunks.append(out)
        meta_runs.append(float(demand))
    values = np.concatenate(chunks, axis=0)
    breaks = tuple(T * r for r in range(1, runs))
    return SeriesTensor(
        values,
        features=tuple(features),
        interval_minutes=interval_minutes,
        weekly_period=MINUTES_PER_WEEK // interval_minutes,
        source="synthetic",
        name=f"synth-{mode}",
        breaks=breaks,
        meta={"demand": meta_runs, "seed": seed, "mode": mode},
    )


def _congestion(g, T, demand, rng, events, rate, temporal_decay, spatial_decay):
    n = g.n
    spawn = np.zeros((T, n))
    if events is None:
        hits = rng.random(T) < rate
        nodes = rng.integers(0, n, size=T)
        depth = rng.uniform(0.2, 0.5, size=T) * min(demand, 1.0)
        for t in np.flatnonzero(hits):
            spawn[t, nodes[t]] = max(spawn[t, nodes[t]], depth[t])
    else:
        for t, node, severity in events:
            spawn[int(t), int(node)] = max(spawn[int(t), int(node)], float(severity))
    succ = [[] for _ in range(n)]
    for s, d, _ in g.edges:
        if s != d:
            succ[s].append(d)
    sev = np.zeros((T, n))
    prev = np.zeros(n)
    for t in range(T):
        cur = np.maximum(spawn[t], temporal_decay * prev)
        for i in range(n):
            if succ[i]:
                cur[i] = max(cur[i], spatial_decay * max(prev[j] for j in succ[i]))
        sev[t] = cur
        prev = cur
    return sev


def _delayed_copy(n, T, freeflow, capacity, demand, drng, nrng, noise, copy_edges, levels, features):
    if not copy_edges:
        raise ValueError("delayed_copy mode needs copy_edges")
    grid = np.linspace(0.0, 1.0, levels)
    q = grid[drng.integers(0, levels, size=(T, n))]
    base = {
        "speed": freeflow * (1.0 - 0.5 * min(demand, 1.0) * q),
        "flow": capacity * (0.3 + 0.6 * min(demand, 1.0) * q),
    }
    out = np.stack([base[f] for f in features], axis=-1)
    out = out + noise * nrng.standard_normal(out.shape)
    for u, v in copy_edges:
        out[1:, v, :] = out[:-1, u, :] + noise * nrng.standard_normal((T - 1, out.shape[2]))
    return out


# ---------------------------------------------------------------------------
# on-disk format


def save_dataset(series, g, directory):
    """Write manifest.json, one CSV per feature and edges.csv."""
    os.makedirs(directory, exist_ok=True)
    files = {}
    T, N, _ = series.shape
    for f, name in enumerate(series.features):
        fname = f"{name}.csv"
        files[name] = fname
        with open(os.path.join(directory, fname), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time"] + [str(i) for i in range(N)])
            for t in range(T):
                w.writerow([t] + [repr(float(x)) for x in series.values[t, :, f]])
    write_edges_csv(g, os.path.join(directory, "edges.csv"))
    manifest = {
        "name": series.name,
        "interval_minutes": series.interval_minutes,
        "features": list(series.features),
        "files": files,
        "edges": "edges.csv",
        "weekly_period": series.weekly_period,
        "source": series.source,
        "breaks": list(series.breaks),
    }
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path


def _parse_time(raw, where):
    try:
        return float(raw)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(raw).timestamp() / 60.0
    except ValueError:
        raise ValueError(f"{where}: unparseable timestamp {raw!r}") from None


def _read_feature_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    if not header or header[0] != "time":
        raise ValueError(f"{path}:1: first column must be 'time'")
    try:
        ids = [int(c) for c in header[1:]]
    except ValueError:
        raise ValueError(f"{path}:1: node columns must be integer ids") from None
    n = len(ids)
    if sorted(ids) != list(range(n)):
        raise ValueError(f"{path}:1: node ids must be exactly 0..{n - 1}, got unknown ids")
    order = np.argsort(ids)
    times, data = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != n + 1:
            raise ValueError(f"{path}:{lineno}: ragged row with {len(row)} fields, expected {n + 1}")
        t = _parse_time(row[0], f"{path}:{lineno}")
        if times and t <= times[-1]:
            raise ValueError(f"{path}:{lineno}: non-monotone timestamp {row[0]!r}")
        times.append(t)
        vals = [float(x) if x.strip() not in ("", "nan", "NaN", "NA") else np.nan for x in row[1:]]
        data.append(vals)
    arr = np.asarray(data, dtype=np.float64)[:, order] if data else np.zeros((0, n))
    return np.asarray(times), arr


def fill_gaps(values, slots_per_day):
    """Linear interpolation over gaps of at most three slots; days holding a
    longer gap are dropped.  Returns (values, kept row indices)."""
    values = values.copy()
    T = values.shape[0]
    bad_days = set()
    flat = values.reshape(T, -1)
    for c in range(flat.shape[1]):
        col = flat[:, c]
        miss = np.isnan(col)
        if not miss.any():
            continue
        t = 0
        while t < T:
            if not miss[t]:
                t += 1
                continue
            s = t
            while t < T and miss[t]:
                t += 1
            if s == 0 or t == T or t - s > MAX_GAP:
                for day in range(s // slots_per_day, (t - 1) // slots_per_day + 1):
                    bad_days.add(day)
                continue
            left, right = col[s - 1], col[t]
            frac = (np.arange(s, t) - (s - 1)) / (t - (s - 1))
            col[s:t] = left + frac * (right - left)
    keep = np.array([i for i in range(T) if i // slots_per_day not in bad_days], dtype=int)
    if bad_days:
        log.warning("dropped %d day(s) with gaps longer than %d slots", len(bad_days), MAX_GAP)
    return flat.reshape(values.shape)[keep], keep


def load_dataset(manifest_path):
    """Read a manifest and its files into ``(SeriesTensor, RoadGraph)``."""
    with open(manifest_path) as fh:
        man = json.load(fh)
    root = os.path.dirname(os.path.abspath(manifest_path))
    for key in ("features", "files", "edges", "interval_minutes"):
        if key not in man:
            raise ValueError(f"{manifest_path}: missing manifest key {key!r}")
    stacks, times = [], None
    for feat in man["features"]:
        t, arr = _read_feature_csv(os.path.join(root, man["files"][feat]))
        if times is not None and (len(t) != len(times) or np.any(t != times)):
            raise ValueError(f"{man['files'][feat]}: timestamps differ from the first feature file")
        times = t
        stacks.append(arr)
    values = np.stack(stacks, axis=-1)
    interval = int(man["interval_minutes"])
    slots = max(MINUTES_PER_DAY // interval, 1)
    breaks = set(man.get("breaks", []))
    if np.isnan(values).any():
        values, keep = fill_gaps(values, slots)
        jumps = np.flatnonzero(np.diff(keep) > 1) + 1
        old = {int(np.searchsorted(keep, b)) for b in breaks}
        breaks = old | {int(j) for j in jumps}
    n = values.shape[1]
    try:
        g = read_edges_csv(os.path.join(root, man["edges"]), n)
    except ValueError as exc:
        raise ValueError(f"{manifest_path}: unknown node id in edges ({exc})") from None
    weekly = man.get("weekly_period") or MINUTES_PER_WEEK // interval
    series = SeriesTensor(
        values,
        features=tuple(man["features"]),
        interval_minutes=interval,
        weekly_period=int(weekly),
        source=man.get("source", "unknown"),
        name=man.get("name", "dataset"),
        breaks=tuple(sorted(b for b in breaks if 0 < b < len(values))),
    )
    return series, g


def ingest_pems(npz_path, distance_csv, out_dir, name, days=None, feature_names=("flow", "occupancy", "speed")):
    """Convert a PeMS-style ``.npz`` (key ``data``, shape (T, N, F)) and its
    ``from,to,cost`` distance file into the manifest format."""
    data = np.load(npz_path)["data"].astype(np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    if days is not None:
        data = data[: days * 288]
    feats = tuple(feature_names[: data.shape[2]])
    edges = []
    with open(distance_csv, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if row:
                edges.append((int(float(row[0])), int(float(row[1])), 1.0))
    g = build_graph(edges, data.shape[1])
    series = SeriesTensor(data, features=feats, interval_minutes=5, weekly_period=2016, source="pems", name=name)
    return save_dataset(series, g, out_dir)


# ---------------------------------------------------------------------------
# splitting, windows, scaling


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple
    train: range
    val: range
    test: range


def chronological_split(T, fractions=(0.6, 0.2, 0.2)):
    if not isinstance(T, int):
        T = T.shape[0]
    if T < 5:
        raise ValueError("need at least 5 time steps to split")
    a = math.floor(fractions[0] * T)
    b = math.floor((fractions[0] + fractions[1]) * T)
    return SplitSpec(tuple(fractions), range(0, a), range(a, b), range(b, T))


@dataclass
class WindowSample:
    input: np.ndarray  # (p, N, d)
    target: np.ndarray  # (H, N)
    start: int


@dataclass
class Windows:
    """Stacked windows; ``inputs`` (S, p, N, d), ``targets`` (S, H, N)."""

    inputs: np.ndarray
    targets: np.ndarray
    starts: np.ndarray

    def __len__(self):
        return len(self.starts)

    def __getitem__(self, i):
        return WindowSample(self.inputs[i], self.targets[i], int(self.starts[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx):
        return Windows(self.inputs[idx], self.targets[idx], self.starts[idx])


def make_windows(series, span, p, H):
    """All stride-1 (p, H) windows inside ``span`` that do not cross a segment break."""
    values = series.values if isinstance(series, SeriesTensor) else np.asarray(series)
    breaks = series.breaks if isinstance(series, SeriesTensor) else ()
    span = range(span.start, span.stop) if isinstance(span, range) else range(*span)
    T, N, d = values.shape
    L = p + H
    starts = [
        s for s in range(span.start, span.stop - L + 1) if not any(s < b < s + L for b in breaks)
    ]
    if not starts:
        log.warning("range %s too short for p=%d, H=%d windows", span, p, H)
        return Windows(np.zeros((0, p, N, d)), np.zeros((0, H, N)), np.zeros(0, dtype=int))
    starts = np.asarray(starts, dtype=int)
    idx_in = starts[:, None] + np.arange(p)[None, :]
    idx_out = starts[:, None] + p + np.arange(H)[None, :]
    return Windows(values[idx_in], values[idx_out, :, 0], starts)


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray  # (d,)
    std: np.ndarray  # (d,)

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean

    def normalize_target(self, y):
        return (y - self.mean[0]) / self.std[0]

    def denormalize_target(self, y):
        return y * self.std[0] + self.mean[0]

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def fit_scaler(values, train_range, floor=1e-8):
    rows = np.asarray(values)[train_range.start : train_range.stop]
    if rows.shape[0] == 0:
        raise ValueError("training range is empty")
    flat = rows.reshape(-1, rows.shape[-1])
    return Scaler(flat.mean(axis=0), np.maximum(flat.std(axis=0), floor))


def zscore(series, train_range):
    """Normalize with statistics from ``train_range`` only."""
    scaler = fit_scaler(series.values, train_range)
    return replace(series, values=scaler.normalize(series.values)), scaler
