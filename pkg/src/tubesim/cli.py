"""Command-line entry points: run, sweep, throughput, inspect."""

from __future__ import annotations

import argparse
import glob
import json
import sys

from . import harness
from .topology import PRESET_NAMES as TOPO_PRESETS, build_preset
from .workflow import PRESET_NAMES as WF_PRESETS, preset_workflow


def _fail(errors) -> int:
    if not isinstance(errors, list):
        errors = [str(errors)]
    print(json.dumps({"errors": errors}), file=sys.stderr)
    return 2


def cmd_run(args) -> int:
    try:
        cfg = harness.ExperimentConfig.load(args.config, seed=args.seed)
        report = harness.run_experiment(cfg, out_dir=args.out)
    except harness.ConfigError as exc:
        return _fail(str(exc).split("; "))
    print(json.dumps(report["summary"], indent=2, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    paths = sorted(glob.glob(args.configs))
    if not paths:
        return _fail([f"no configs match {args.configs!r}"])
    configs = []
    try:
        for p in paths:
            cfg = harness.ExperimentConfig.load(p, seed=args.seed)
            cfg.label = cfg.label or p
            configs.append(cfg)
        rows = harness.compare(configs, out_dir=args.out)
    except harness.ConfigError as exc:
        return _fail(str(exc).split("; "))
    print(json.dumps(rows, indent=2, sort_keys=True))
    return 0


def cmd_throughput(args) -> int:
    try:
        cfg = harness.ExperimentConfig.load(args.config, seed=args.seed)
        result = harness.max_throughput(cfg, slo_ms=args.slo_ms)
    except harness.ConfigError as exc:
        return _fail(str(exc).split("; "))
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_inspect(args) -> int:
    try:
        if args.kind == "topology":
            if args.name not in TOPO_PRESETS:
                return _fail([f"unknown topology {args.name!r} (known: {list(TOPO_PRESETS)})"])
            print(json.dumps(build_preset(args.name).to_dict(), indent=2))
        else:
            if args.name not in WF_PRESETS:
                return _fail([f"unknown workflow {args.name!r} (known: {list(WF_PRESETS)})"])
            print(json.dumps(preset_workflow(args.name).to_dict(), indent=2))
    except Exception as exc:
        return _fail([str(exc)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tubesim",
        description="Simulate inter-function data passing strategies on GPU servers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None, help="directory for CSV/JSON/figures")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run and compare several configs")
    p_sweep.add_argument("--configs", required=True, help="glob of config files")
    p_sweep.add_argument("--seed", type=int, default=None)
    p_sweep.add_argument("--out", default=None)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_tp = sub.add_parser("throughput", help="binary-search the max sustainable rate")
    p_tp.add_argument("--config", required=True)
    p_tp.add_argument("--slo-ms", type=float, default=None)
    p_tp.add_argument("--seed", type=int, default=None)
    p_tp.set_defaults(fn=cmd_throughput)

    p_ins = sub.add_parser("inspect", help="print a preset definition")
    p_ins.add_argument("kind", choices=["topology", "workflow"])
    p_ins.add_argument("name")
    p_ins.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
