"""Command line entry point: ``dswm <subcommand> [flags]``.

Exit codes: 0 success, 1 unexpected error, 2 config/usage error, 3 missing
prerequisite (dataset or checkpoint), 4 failed acceptance assertion.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..gridworld import TopologyKind
from .config import ConfigError, ExperimentConfig
from .pipeline import (MODEL_KINDS, AcceptanceFailure, MissingPrerequisite, eval_rollouts, make_datasets,
                       reproduce_all, train, train_agents)

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_ACCEPTANCE = 0, 1, 2, 3, 4

log = logging.getLogger("dswm")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (defaults are the reference settings)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default="runs/default", help="output directory (default: %(default)s)")
    common.add_argument("--topology", action="append",
                        help="restrict to a topology; repeatable (Open, Rooms, Ring, Hallway)")
    common.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dswm", description="Dual-stream world model experiments")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("make-datasets", parents=[common], help="behaviour datasets and pattern-map pools")
    t = sub.add_parser("train", parents=[common], help="train world models")
    t.add_argument("--model", action="append", choices=MODEL_KINDS, help="model kind; repeatable")
    sub.add_parser("eval-rollouts", parents=[common], help="paired rollouts, place fields")
    sub.add_parser("train-agents", parents=[common], help="successor-similarity agents")
    sub.add_parser("reproduce-all", parents=[common], help="every stage in order")
    return p


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _topologies(args, cfg):
    if not args.topology:
        return None
    try:
        return [TopologyKind.parse(t).value for t in args.topology]
    except ValueError as e:
        raise ConfigError(str(e)) from None


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors, 0 on --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        topos = _topologies(args, cfg)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cmd = args.command
        if cmd == "make-datasets":
            files = make_datasets(cfg, args.out, topos, args.workers)
            print(f"wrote {len(files)} files under {args.out}")
        elif cmd == "train":
            files = train(cfg, args.out, topos, args.model, args.workers)
            print(f"{len(files)} model files under {args.out}")
        elif cmd == "eval-rollouts":
            _report_rollouts(eval_rollouts(cfg, args.out, topos, args.workers))
        elif cmd == "train-agents":
            _report_agents(train_agents(cfg, args.out, topos, args.workers))
        elif cmd == "reproduce-all":
            if topos:
                d = dict(cfg.data)
                d["topologies"] = topos
                cfg = ExperimentConfig(d)
            res = reproduce_all(cfg, args.out, args.workers)
            _report_rollouts(res["rollouts"])
            _report_agents(res["agents"])
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except AcceptanceFailure as e:
        print(f"acceptance check failed: {e}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def _report_rollouts(summary):
    o = summary["overall"]
    p = summary["paired"]
    print(f"rollout MSE  DSWM {o['DSWM']['mean']:.3f} ± {o['DSWM']['stderr']:.3f}  "
          f"WORLD {o['WORLD']['mean']:.3f} ± {o['WORLD']['stderr']:.3f}  (n={p['n']}, p={p['p_value']:.2g})")


def _report_agents(body):
    print(json.dumps(body["table"], indent=1, sort_keys=True))


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
