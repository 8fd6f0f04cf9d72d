"""Command-line entry point: ``trafficbench <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import data, harness
from .harness import ExperimentConfig, StageError


def _read_json(path):
    if path is None:
        raise ValueError("--config is required")
    with open(path) as fh:
        return json.load(fh)


def _write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _experiment(args):
    raw = _read_json(args.config)
    if args.preset:
        raw["preset"] = args.preset
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.convention:
        raw["convention"] = args.convention
    if args.out:
        raw["out"] = args.out
    if args.horizon is not None and args.command != "eval":
        raw.setdefault("hyper", {})["horizon"] = args.horizon
    if raw.get("dataset") and not os.path.isabs(raw["dataset"]):
        raw["dataset"] = os.path.join(os.path.dirname(os.path.abspath(args.config)), raw["dataset"])
    return ExperimentConfig.from_dict(raw)


def cmd_synth(args):
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    series, g = harness.synth_from_config(raw)
    path = data.save_dataset(series, g, args.out)
    print(path)


def cmd_ingest(args):
    raw = _read_json(args.config)
    path = data.ingest_pems(raw["npz"], raw["distance"], args.out, raw.get("name", "pems"), raw.get("days"))
    print(path)


def _print_result(res):
    if res.status != "ok":
        print(json.dumps({"status": res.status, "run_dir": res.run_dir}))
    else:
        out = res.report.to_dict()
        out["run_dir"] = res.run_dir
        print(json.dumps(out, indent=2))


def cmd_train(args):
    cfg = _experiment(args)
    _print_result(harness.run_experiment(cfg))


def cmd_eval(args):
    cfg = _experiment(args)
    run_dir = os.path.join(cfg.out, cfg.digest())
    if not os.path.isdir(run_dir):
        res = harness.run_experiment(cfg)
        run_dir = res.run_dir
        if res.status != "ok":
            _print_result(res)
            return
    report = harness.evaluate_run(run_dir, args.convention, args.horizon)
    name = f"eval_{report.convention}_{report.horizon}.json"
    _write_json(os.path.join(run_dir, name), report.to_dict())
    print(report.to_json())


def cmd_tune(args):
    cfg = _experiment(args)
    result = harness.tune(cfg)
    final = harness.run_experiment(cfg.with_hyper(**result.best))
    out = {
        "best": result.best,
        "validation_mae": result.score,
        "cycles": result.cycles,
        "trace": [list(t) for t in result.trace],
        "final_run": final.run_dir,
        "final_report": final.report.to_dict() if final.report else None,
    }
    _write_json(os.path.join(cfg.out, f"tune_{cfg.digest()}.json"), out)
    print(json.dumps({k: out[k] for k in ("best", "validation_mae", "final_run")}, indent=2))


def cmd_count_params(args):
    cfg = _experiment(args)
    presets = [cfg.preset] if args.preset else None
    rows = harness.complexity_table(cfg, presets)
    lines = ["| Model | Complexity |", "|---|---|"] + [f"| {n} | {c if c is not None else 'n/a'} |" for n, c in rows]
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "complexity.md"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    _write_json(os.path.join(cfg.out, "complexity.json"), dict(rows))
    print("\n".join(lines))


def cmd_compare(args):
    table = harness.compare(args.runs)
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    md = table.to_markdown()
    with open(os.path.join(out, "comparison.md"), "w") as fh:
        fh.write(md)
    _write_json(os.path.join(out, "comparison.json"), table.to_dict())
    print(md, end="")


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "tune": cmd_tune,
    "count-params": cmd_count_params,
    "compare": cmd_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="trafficbench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.add_argument("--preset")
        p.add_argument("--horizon", type=int)
        p.add_argument("--convention", choices=["horizon", "cumulative"])
        p.add_argument("--out")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "compare":
            p.add_argument("runs", nargs="+")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command in ("synth", "ingest") and not args.out:
        print(f"error [{args.command}]: --out is required", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
