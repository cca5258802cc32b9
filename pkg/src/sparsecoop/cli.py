"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_experiment, parse_range_spec
from .cpm import CpmDecodeError, decode_cpm, describe, hex_dump
from .experiment import compute, write_artifacts
from .pipeline import ObjectTracker, run_local

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

DEFAULT_SWEEP = {"epsilon": "0:1:0.2", "latency_ms": "0,100,200"}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenario", required=True, help="scenario YAML path or built-in name")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out", default="out", help="output directory")


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epsilon", help="pose-noise scale: v, a:b:step or v1,v2")
    p.add_argument("--latency-ms", dest="latency_ms", help="latency: v, a:b:step or v1,v2")
    p.add_argument("--cpm-threshold", dest="cpm_threshold", type=float, help="message score threshold in [0, 1]")
    p.add_argument("--sorting", choices=("global", "local"), help="AP score sorting")
    p.add_argument("--sweep", action="append", default=[], metavar="NAME=SPEC", help="sweep epsilon or latency_ms (repeatable)")
    p.add_argument("--workers", type=int, default=1, help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsecoop", description="Cooperative sparse detection experiments on simulated scenes.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment")
    _common(run)
    _experiment_flags(run)
    sweep = sub.add_parser("sweep", help="run the standard epsilon x latency sweep")
    _common(sweep)
    _experiment_flags(sweep)
    insp = sub.add_parser("inspect-cpm", help="field and hex dump of an encoded message")
    insp.add_argument("--file", required=True)
    insp.add_argument("--hex", action="store_true", help="also print a hex dump")
    grid = sub.add_parser("grid-report", help="sparse connectivity and center coverage per frame")
    grid.add_argument("--scenario", required=True)
    grid.add_argument("--seed", type=int)
    grid.add_argument("--agent", type=int, help="agent id (default: the ego)")
    grid.add_argument("--frames", help="frame indices, e.g. 0,3 or 0:7:1 (default: all)")
    return parser


def _overrides(args, sweep_defaults: dict[str, str] | None = None) -> dict:
    ov = {
        "seed": args.seed,
        "epsilon": args.epsilon,
        "latency_ms": args.latency_ms,
        "cpm_threshold": args.cpm_threshold,
        "sorting": args.sorting,
    }
    specs = dict(sweep_defaults or {})
    for item in args.sweep:
        name, sep, spec = item.partition("=")
        name = name.strip().replace("-", "_")
        if not sep or name not in ("epsilon", "latency_ms"):
            raise ConfigError(f"bad --sweep {item!r}: expected epsilon=SPEC or latency_ms=SPEC", "<command line>")
        specs[name] = spec
    for name, spec in specs.items():
        if ov[name] is None:
            ov[name] = spec
    return ov


def _cmd_run(args, sweep_defaults=None) -> int:
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1", "<command line>")
    exp = load_experiment(args.scenario, _overrides(args, sweep_defaults))
    result = compute(exp, args.workers)
    write_artifacts(result, args.out, args.scenario)
    n_points = len(exp.sweep.epsilon) * len(exp.sweep.latency_ms)
    print(f"{exp.name}: {len(result.rows)} metric rows over {n_points} sweep point(s) -> {Path(args.out) / 'metrics.csv'}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    data = Path(args.file).read_bytes()
    msg = decode_cpm(data)
    print(json.dumps(describe(msg), indent=2))
    if args.hex:
        print(hex_dump(data))
    return EXIT_OK


def _cmd_grid(args) -> int:
    exp = load_experiment(args.scenario, {"seed": args.seed})
    scene = exp.scenario
    agent_id = exp.pipeline.ego_id if args.agent is None else args.agent
    try:
        agent = scene.agent(agent_id)
    except KeyError:
        raise ConfigError(f"no agent with id {agent_id}", "<command line>") from None
    frames = range(scene.n_frames)
    if args.frames:
        try:
            frames = [int(v) for v in parse_range_spec(args.frames, "frames")]
        except ValueError as exc:
            raise ConfigError(str(exc), "<command line>") from None
    cfg = exp.pipeline.__class__(**{**exp.pipeline.__dict__, "ego_id": agent_id, "grid_report": True})
    tracker = ObjectTracker()
    report = []
    for k in range(max(frames, default=-1) + 1):
        lf = run_local(scene, agent, k, tracker, cfg)
        if k in frames:
            report.append({"frame": k, "n_points": lf.n_points, "n_free_points": lf.n_free, **lf.grid})
    print(json.dumps({"scenario": exp.name, "agent": agent_id, "frames": report}, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_run(args, DEFAULT_SWEEP)
        if args.command == "inspect-cpm":
            return _cmd_inspect(args)
        return _cmd_grid(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CpmDecodeError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
