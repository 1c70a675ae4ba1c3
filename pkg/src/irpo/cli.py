"""Command line: train, eval, rewards, analytic, aggregate.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .agent import TrainingError, make_grid, num_rewards
from .config import AGENTS, ConfigError, RunConfig, apply_overrides, load_config
from .envs import GridError
from .harness import analytic_run, evaluate_run, quadratic_objectives, run_training
from .intrinsic import IntrinsicRewardError, build_rewards, dump_reward_maps
from .metrics import aggregate, aggregate_csv
from .numerics import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if getattr(args, "agent", None):
        overrides.append(f"agent={args.agent}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return apply_overrides(cfg, overrides)


def _write(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_train(args) -> int:
    cfg = _config(args)
    out = args.output or cfg.output
    if not out:
        raise ConfigError("train needs --output or an 'output' key in the config")
    cfg.output = str(out)
    s = run_training(cfg, out, checkpoint_every=args.checkpoint_every)
    print(f"{cfg.agent} seed {cfg.seed}: {s.iterations} iterations, {s.samples_used} samples, "
          f"final success {s.final_success:.3f}, return {s.final_return:.4f} -> {s.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ret, succ = evaluate_run(args.run_dir, args.episodes)
    print(f"mean_return {ret:.6f} success_rate {succ:.3f}")
    return EXIT_OK


def cmd_rewards(args) -> int:
    cfg = _config(args)
    grid = make_grid(cfg)
    K = args.K if args.K is not None else num_rewards(cfg)
    rewards = build_rewards(grid, cfg.intrinsic.kind, K, cfg.intrinsic.seed)
    _write(dump_reward_maps(rewards, grid), args.output)
    return EXIT_OK


def cmd_analytic(args) -> int:
    if not 1 <= args.K <= 4:
        raise ConfigError("--K must be between 1 and 4")
    ext, intr = quadratic_objectives(args.K)
    if args.theta0 is not None:
        theta0 = args.theta0
    else:
        theta0 = np.random.default_rng(args.seed).uniform(-3, 3, size=2)
    res = analytic_run(ext, intr, args.N, args.eta, args.iterations, theta0, args.base_lr, args.tau)
    _write(res.to_csv(), args.output)
    print(f"final base ({res.theta[0]:.9g}, {res.theta[1]:.9g}), omega {np.round(res.omegas[-1], 4).tolist()}",
          file=sys.stderr)
    return EXIT_OK


def cmd_aggregate(args) -> int:
    result = aggregate(args.files, args.column, args.points)
    _write(aggregate_csv(result), args.output)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irpo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train an agent to its sample budget")
    config_args(t)
    t.add_argument("--agent", choices=AGENTS)
    t.add_argument("--output", help="run directory")
    t.add_argument("--checkpoint-every", type=int, default=10)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a saved run")
    e.add_argument("run_dir")
    e.add_argument("--episodes", type=int)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rewards", help="dump intrinsic reward maps as CSV")
    config_args(r)
    r.add_argument("--K", type=int)
    r.add_argument("--output")
    r.set_defaults(func=cmd_rewards)

    a = sub.add_parser("analytic", help="exact-gradient run on the quadratic testbed")
    a.add_argument("--K", type=int, default=1)
    a.add_argument("--N", type=int, default=5)
    a.add_argument("--eta", type=float, default=0.1)
    a.add_argument("--tau", type=float, help="fixed temperature (default: annealed)")
    a.add_argument("--iterations", type=int, default=200)
    a.add_argument("--base-lr", type=float, default=1.0)
    a.add_argument("--theta0", type=float, nargs=2)
    a.add_argument("--seed", type=int, default=0, help="draws theta0 when --theta0 is absent")
    a.add_argument("--output")
    a.set_defaults(func=cmd_analytic)

    g = sub.add_parser("aggregate", help="mean and 95%% interval across per-seed metrics files")
    g.add_argument("files", nargs="+")
    g.add_argument("--column", default="success")
    g.add_argument("--points", type=int)
    g.add_argument("--output")
    g.set_defaults(func=cmd_aggregate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, GridError, IntrinsicRewardError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, TrainingError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
