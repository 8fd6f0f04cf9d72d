import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficbench import cli, data, forest, harness
from trafficbench.harness import ExperimentConfig, GridSpec, coordinate_descent

SMALL = {"n_nodes": 3, "topology": "chain", "T": 200, "noise": 0.5, "seed": 1}


def cfg(preset, out, **hyper):
    base = {"window": 3, "horizon": 2, "hidden": 4, "epochs": 3, "trees": 3, "depth": 3}
    base.update(hyper)
    return ExperimentConfig(preset, synth=dict(SMALL), hyper=base, out=str(out))


# ---------------------------------------------------------------------------
# coordinate descent


def test_single_coordinate_is_exhaustive():
    table = {1e-5: 0.7, 1e-4: 0.2, 1e-3: 0.5}
    res = coordinate_descent(lambda p: table[p["lr"]], GridSpec([("lr", [1e-5, 1e-4, 1e-3])]))
    assert res.best == {"lr": 1e-4} and res.score == 0.2


def test_separable_objective_reaches_grid_optimum():
    grid = GridSpec([("a", [1, 2, 3, 4, 5]), ("b", [0.1, 0.2, 0.3])])
    f = lambda p: (p["a"] - 4) ** 2 + 10 * (p["b"] - 0.3) ** 2  # noqa: E731
    res = coordinate_descent(f, grid)
    best = min(((a, b) for a in [1, 2, 3, 4, 5] for b in [0.1, 0.2, 0.3]), key=lambda t: f({"a": t[0], "b": t[1]}))
    assert (res.best["a"], res.best["b"]) == best


def test_optimal_start_stops_after_one_cycle():
    grid = GridSpec([("a", [1, 2, 3]), ("b", [1, 2])])
    res = coordinate_descent(lambda p: p["a"] + p["b"], grid, start={"a": 1, "b": 1})
    assert res.cycles == 1 and res.best == {"a": 1, "b": 1}


def test_ties_keep_smaller_value_and_failures_score_inf():
    def f(p):
        if p["a"] == 1:
            raise RuntimeError("boom")
        return 0.0

    res = coordinate_descent(f, GridSpec([("a", [1, 2, 3])]))
    assert res.best == {"a": 2}
    assert res.cache[(("a", 1),)] == math.inf


def test_cache_avoids_repeat_evaluations():
    calls = []

    def f(p):
        calls.append(tuple(sorted(p.items())))
        return (p["a"] - 2) ** 2 + (p["b"] - 1) ** 2

    coordinate_descent(f, GridSpec([("a", [0, 1, 2, 3]), ("b", [0, 1, 2])]))
    assert len(calls) == len(set(calls))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_result_is_coordinatewise_minimum(seed, na, nb, nc):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 6, size=(na, nb, nc)).astype(float)  # small range to force ties
    grid = GridSpec([("a", list(range(na))), ("b", list(range(nb))), ("c", list(range(nc)))])
    res = coordinate_descent(lambda p: scores[p["a"], p["b"], p["c"]], grid, max_cycles=50)
    a, b, c = res.best["a"], res.best["b"], res.best["c"]
    s = scores[a, b, c]
    assert s == res.score
    assert s <= scores[:, b, c].min() and s <= scores[a, :, c].min() and s <= scores[a, b, :].min()
    for name, vals in grid.coords:
        for v in vals:
            key = tuple(sorted(dict(res.best, **{name: v}).items()))
            assert res.cache[key] >= s


def test_default_grid_rows():
    assert harness.default_grid("GRU").names == ["k", "window", "hidden", "batch_size", "lr", "l2", "epochs"]
    assert harness.default_grid("ARI").names == ["window", "dff"]
    assert harness.default_grid("RF").names == ["k", "window", "trees", "depth"]
    assert dict(harness.default_grid("RF", simulation=False).coords)["window"] == [12]


def test_tune_never_touches_test_range(tmp_path, monkeypatch):
    test_span = data.chronological_split(SMALL["T"]).test
    real_windows, real_features = data.make_windows, forest.build_features

    def guard(span):
        assert span.stop <= test_span.start, f"span {span} reaches the test range"

    def windows(series, span, p, H):
        guard(span)
        return real_windows(series, span, p, H)

    def features(*args, span=None, **kw):
        guard(span)
        return real_features(*args, span=span, **kw)

    monkeypatch.setattr(data, "make_windows", windows)
    monkeypatch.setattr(forest, "build_features", features)
    for preset, grid in (("RF", [("depth", [1, 2])]), ("GRU", [("lr", [1e-3, 1e-2])]), ("ARI", [("dff", [0, 1])])):
        res = harness.tune(cfg(preset, tmp_path), GridSpec(grid))
        assert math.isfinite(res.score)


def test_validation_epochs_are_capped(tmp_path, monkeypatch):
    seen = []
    real = harness.forecaster.train

    def spy(model, tr, va, tc):
        seen.append(tc.epochs)
        tc.epochs = 1
        return real(model, tr, va, tc)

    monkeypatch.setattr(harness.forecaster, "train", spy)
    harness.run_experiment(cfg("GRU", tmp_path, epochs=2000), stage="validate", write=False)
    assert seen == [harness.TUNE_EPOCH_CAP]


# ---------------------------------------------------------------------------
# experiments


def test_ha_not_applicable_on_single_day(tmp_path):
    c = ExperimentConfig("HA", synth={"n_nodes": 2, "T": 1440, "seed": 0}, hyper={"window": 3, "horizon": 2},
                         out=str(tmp_path))
    res = harness.run_experiment(c)
    assert res.status == "not_applicable" and res.report is None
    doc = json.load(open(os.path.join(res.run_dir, "metrics.json")))
    assert doc["status"] == "not_applicable"


def test_ha_runs_on_multi_week_data(tmp_path):
    c = ExperimentConfig("HA", synth={"n_nodes": 2, "T": 3 * 2016, "seed": 0, "interval_minutes": 5, "noise": 1.0},
                         hyper={"window": 3, "horizon": 2}, out=str(tmp_path))
    res = harness.run_experiment(c)
    assert res.status == "ok" and res.complexity == 2 * 2016


def test_rf_recovers_delayed_copy_exactly(tmp_path):
    synth = {"edges": [[0, 1]], "T": 400, "noise": 0.0, "seed": 5, "mode": "delayed_copy", "copy_edges": [[0, 1]]}
    c = ExperimentConfig("RF", synth=synth, hyper={"window": 2, "horizon": 1, "trees": 10, "depth": 10},
                         eval_nodes=[1], out=str(tmp_path))
    res = harness.run_experiment(c)
    assert res.report.rmse < 1e-6


def test_stage_tagged_errors(tmp_path):
    with pytest.raises(harness.StageError) as info:
        harness.run_experiment(cfg("GRU", tmp_path, window=150))
    assert info.value.stage == "window"
    with pytest.raises(ValueError):
        ExperimentConfig("LSTM", synth=SMALL)
    with pytest.raises(ValueError):
        ExperimentConfig("GRU", synth=SMALL, hyper={"dropout": 0.1})


def test_run_directory_contents(tmp_path):
    res = harness.run_experiment(cfg("AGRNN (input)", tmp_path))
    names = set(os.listdir(res.run_dir))
    assert {"config.json", "metrics.json", "checkpoint.json", "train_log.csv", "predictions.npy"} <= names
    assert os.path.basename(res.run_dir) == cfg("AGRNN (input)", tmp_path).digest()
    again = harness.evaluate_run(res.run_dir)
    assert again == res.report
    cum = harness.evaluate_run(res.run_dir, "cumulative", 1)
    assert cum.horizon == 1 and cum.convention == "cumulative"


def test_count_params_examples(tmp_path):
    c = ExperimentConfig("GRU", synth={"n_nodes": 1, "T": 100}, hyper={"hidden": 1, "horizon": 1}, out=str(tmp_path))
    assert harness.count_params(c) == 11
    c = ExperimentConfig("RF", synth={"n_nodes": 1, "T": 100, "seed": 2, "noise": 1.0},
                         hyper={"trees": 7, "depth": 0, "window": 2, "horizon": 1}, out=str(tmp_path))
    assert harness.count_params(c) == 7


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3),
       st.sampled_from(["AGRNN (input)", "AGRNN (hidden)", "AGRNN (both)"]), st.integers(0, 1000))
def test_independent_counting_identity(n, d, h, H, preset, seed):
    rng = np.random.default_rng(seed)
    edges = [[int(a), int(b)] for a, b in rng.integers(0, n, size=(n, 2)) if a != b]
    synth = {"n_nodes": n, "edges": edges, "T": 50}
    hyper = {"hidden": h, "horizon": H, "k": 1}
    ind = harness.count_params(ExperimentConfig(preset, synth=synth, hyper=hyper), input_dim=d)
    shared_cell = 3 * (d * h + h * h + h)
    mask = harness.forecaster.neighborhood_mask(harness.graph_from_config(synth), 1)
    assert ind == n * shared_cell + int(mask.sum()) + n * (h * H + H)


# ---------------------------------------------------------------------------
# comparison


def fake_run(root, name, preset, mae, convention="horizon", horizon=3, dataset="d"):
    d = root / name
    d.mkdir()
    (d / "config.json").write_text(json.dumps({"preset": preset, "dataset": dataset, "synth": None}))
    rep = None if mae is None else {"mae": mae, "mape_percent": mae * 2, "rmse": mae + 1,
                                     "convention": convention, "horizon": horizon, "masked": 0, "count": 1}
    doc = {"status": "ok" if rep else "not_applicable"}
    if rep:
        doc["report"] = rep
    (d / "metrics.json").write_text(json.dumps(doc))
    return str(d)


def test_compare_examples(tmp_path):
    t = harness.compare([fake_run(tmp_path, "a", "GRNN", 3.0), fake_run(tmp_path, "b", "GRU", 4.0)])
    assert ("GRNN", "MAE@3") in t.best and ("GRU", "MAE@3") in t.second
    md = t.to_markdown()
    assert "**3.0000**" in md and "<u>4.0000</u>" in md


def test_compare_tied_minimum(tmp_path):
    t = harness.compare([fake_run(tmp_path, "a", "GRNN", 3.0), fake_run(tmp_path, "b", "GRU", 3.0),
                         fake_run(tmp_path, "c", "RF", 5.0)])
    assert {r for r, c in t.best if c == "MAE@3"} == {"GRNN", "GRU"}
    assert not t.second


def test_compare_not_applicable_and_order(tmp_path):
    t = harness.compare([fake_run(tmp_path, "a", "RF", 3.0), fake_run(tmp_path, "b", "HA", None),
                         fake_run(tmp_path, "c", "AGCRN", 2.0)])
    assert t.rows == ["AGCRN", "HA", "RF"]
    assert "Not applicable" in t.to_markdown()


def test_compare_rejects_mixed_runs(tmp_path):
    with pytest.raises(ValueError, match="convention"):
        harness.compare([fake_run(tmp_path, "a", "RF", 3.0), fake_run(tmp_path, "b", "GRU", 3.0, "cumulative")])
    with pytest.raises(ValueError, match="dataset"):
        harness.compare([fake_run(tmp_path, "c", "RF", 3.0), fake_run(tmp_path, "d", "GRU", 3.0, dataset="e")])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.one_of(st.none(), st.integers(0, 5).map(float)), min_size=1, max_size=8))
def test_rank_markers_match_sort_oracle(values):
    column = {f"m{i}": v for i, v in enumerate(values)}
    best, second = harness.rank_markers(column)
    present = sorted(v for v in values if v is not None)
    if not present:
        assert not best and not second
        return
    assert best == {r for r, v in column.items() if v == present[0]}
    # competition ranking: the second place exists only when the minimum is unique
    if present.count(present[0]) > 1 or len(set(present)) == 1:
        assert not second
    else:
        nxt = sorted(set(present))[1]
        assert second == {r for r, v in column.items() if v == nxt}


# ---------------------------------------------------------------------------
# command line


def test_cli_round_trip(tmp_path, capsys):
    (tmp_path / "synth.json").write_text(json.dumps(SMALL))
    assert cli.main(["synth", "--config", str(tmp_path / "synth.json"), "--out", str(tmp_path / "ds")]) == 0
    runs = []
    for preset in ("GRU", "ARI"):
        conf = {"preset": preset, "dataset": "ds/manifest.json", "hyper": {"window": 3, "horizon": 2, "epochs": 2, "hidden": 4}}
        path = tmp_path / f"{preset}.json"
        path.write_text(json.dumps(conf))
        capsys.readouterr()
        assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / "runs"), "--seed", "3"]) == 0
        runs.append(json.loads(capsys.readouterr().out)["run_dir"])
    assert cli.main(["eval", "--config", str(tmp_path / "GRU.json"), "--out", str(tmp_path / "runs"), "--seed", "3",
                     "--horizon", "1", "--convention", "cumulative"]) == 0
    assert json.loads(capsys.readouterr().out)["horizon"] == 1
    assert cli.main(["compare", "--out", str(tmp_path / "cmp")] + runs) == 0
    assert (tmp_path / "cmp" / "comparison.md").exists()
    assert cli.main(["count-params", "--config", str(tmp_path / "GRU.json"), "--preset", "AGCRN",
                     "--out", str(tmp_path / "cx")]) == 0
    assert json.load(open(tmp_path / "cx" / "complexity.json"))["AGCRN"] > 0


def test_cli_tune(tmp_path, capsys):
    conf = {"preset": "ARI", "synth": SMALL, "hyper": {"horizon": 2}}
    (tmp_path / "ari.json").write_text(json.dumps(conf))
    assert cli.main(["tune", "--config", str(tmp_path / "ari.json"), "--out", str(tmp_path / "runs")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out["best"]) == {"window", "dff"}


def test_cli_failure_is_stage_tagged(tmp_path, capsys):
    conf = {"preset": "GRU", "synth": SMALL, "hyper": {"window": 500}}
    (tmp_path / "bad.json").write_text(json.dumps(conf))
    assert cli.main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 1
    assert "error [window]" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 1
