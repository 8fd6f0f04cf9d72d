"""Graph-recurrent traffic forecasting variants, random forests and a benchmark harness."""

from .cells import CellSpec, PRESETS, make_spec
from .data import SeriesTensor, chronological_split, load_dataset, make_windows, synth_generate, zscore
from .forecaster import ForecastModel, TrainConfig, build_model, train
from .graph import RoadGraph, aggregation_matrix, build_graph, k_hop_neighborhood
from .harness import ExperimentConfig, compare, run_experiment, tune
from .metrics import MetricReport, compute_metrics

__all__ = [
    "CellSpec",
    "ExperimentConfig",
    "ForecastModel",
    "MetricReport",
    "PRESETS",
    "RoadGraph",
    "SeriesTensor",
    "TrainConfig",
    "aggregation_matrix",
    "build_graph",
    "build_model",
    "chronological_split",
    "compare",
    "compute_metrics",
    "k_hop_neighborhood",
    "load_dataset",
    "make_spec",
    "make_windows",
    "run_experiment",
    "synth_generate",
    "train",
    "tune",
    "zscore",
]
