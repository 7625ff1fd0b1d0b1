"""Experiment runner: single runs, parameter sweeps, topology inspection.

Exit codes: 0 success, 2 configuration problem, 3 runtime failure.
Environment variables SYBILSIM_WORKERS and SYBILSIM_OUT_DIR override the
worker count and output directory when the flags are absent; every other
knob comes from the config file.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from typing import List, Optional

from .config import AGGREGATORS, ConfigError, SimulationConfig, load_config
from .engine import _fmt, run_simulation
from .topology import build_attack_network

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SWEEP_AXES = ("phi", "alpha", "aggregator")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sybilsim",
        description="Simulate decentralized learning under Sybil poisoning.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML config file")
    common.add_argument("--seed", type=int, default=None, help="override the run seed")
    common.add_argument(
        "--workers", type=int, default=None, help="worker threads per run"
    )
    common.add_argument("--out-dir", default=None, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="execute one simulation")
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser(
        "sweep", parents=[common], help="run one config across an axis of values"
    )
    sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep.add_argument(
        "--values",
        required=True,
        help="comma-separated values for the axis, e.g. 0.5,1,2",
    )
    sweep.set_defaults(func=cmd_sweep)

    topo = sub.add_parser(
        "topology", parents=[common], help="generate and inspect the network"
    )
    topo.set_defaults(func=cmd_topology)

    val = sub.add_parser("validate", parents=[common], help="check a config file")
    val.set_defaults(func=cmd_validate)
    return parser


def _resolve(args) -> tuple:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = (
        args.out_dir
        or os.environ.get("SYBILSIM_OUT_DIR")
        or cfg.out_dir
        or "runs"
    )
    workers = args.workers
    if workers is None:
        workers = int(os.environ.get("SYBILSIM_WORKERS", "1"))
    if workers < 1:
        raise ConfigError("workers: must be >= 1")
    return cfg, out_dir, workers


def cmd_run(args) -> int:
    cfg, out_dir, workers = _resolve(args)
    result = run_simulation(cfg, workers=workers)
    result.write_outputs(out_dir)
    last = result.metrics[-1]
    print(
        f"{cfg.aggregator}: {len(result.metrics)} rounds, "
        f"final accuracy {_fmt(last.mean_accuracy)}, "
        f"final attack score {_fmt(last.mean_attack_score)}"
    )
    print(f"wrote {os.path.join(out_dir, 'metrics.csv')}")
    return EXIT_OK


def _parse_values(axis: str, raw: str) -> List:
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ConfigError("values: must list at least one value")
    if axis == "aggregator":
        for p in parts:
            if p not in AGGREGATORS:
                raise ConfigError(
                    f"values: {p!r} is not one of {', '.join(AGGREGATORS)}"
                )
        return parts
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"values: {axis} values must be numbers") from None


def _with_axis(cfg: SimulationConfig, axis: str, value) -> SimulationConfig:
    variant = copy.deepcopy(cfg)
    if axis == "phi":
        if variant.attack is None:
            raise ConfigError("attack: a phi sweep needs an attack section")
        variant.attack.phi = value
    elif axis == "alpha":
        variant.data.alpha = value
    else:
        variant.aggregator = value
    return variant.validate()


def cmd_sweep(args) -> int:
    cfg, out_dir, workers = _resolve(args)
    values = _parse_values(args.axis, args.values)
    variants = [(v, _with_axis(cfg, args.axis, v)) for v in values]
    summary = ["axis,value,final_round,final_mean_accuracy,final_mean_attack_score"]
    for value, variant in variants:
        run_dir = os.path.join(out_dir, f"{args.axis}-{value}")
        result = run_simulation(variant, workers=workers)
        result.write_outputs(run_dir)
        last = result.metrics[-1]
        summary.append(
            f"{args.axis},{value},{last.round},"
            f"{_fmt(last.mean_accuracy)},{_fmt(last.mean_attack_score)}"
        )
        print(
            f"{args.axis}={value}: final accuracy {_fmt(last.mean_accuracy)}, "
            f"attack score {_fmt(last.mean_attack_score)}"
        )
    os.makedirs(out_dir, exist_ok=True)
    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", newline="") as fh:
        fh.write("\n".join(summary) + "\n")
    print(f"wrote {summary_path}")
    return EXIT_OK


def cmd_topology(args) -> int:
    cfg, out_dir, _ = _resolve(args)
    phi = cfg.attack.phi if cfg.attack is not None else None
    topo_seed = cfg.topology.seed if cfg.topology.seed is not None else cfg.seed
    honest_g, plan, full_g = build_attack_network(
        cfg.honest_nodes, cfg.topology.radius, cfg.degree_bound, phi, topo_seed
    )
    os.makedirs(out_dir, exist_ok=True)
    topo_path = os.path.join(out_dir, "topology.json")
    with open(topo_path, "w") as fh:
        json.dump(full_g.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"{len(full_g.honest)} honest nodes, {len(full_g.sybils)} sybils, "
        f"{len(full_g.edges)} edges"
    )
    if plan is not None:
        plan_path = os.path.join(out_dir, "attack_plan.json")
        with open(plan_path, "w") as fh:
            json.dump(plan.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"scenario: {plan.scenario} (phi={plan.phi})")
        print(f"wrote {topo_path} and {plan_path}")
    else:
        print(f"wrote {topo_path}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg, _, _ = _resolve(args)
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    print("config ok")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything past validation is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
