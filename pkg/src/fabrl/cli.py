"""Command line interface.

Subcommands: ``baseline``, ``train``, ``eval``, ``timing``, ``emit-model``.
The default output root comes from the ``FABRL_OUT`` environment variable
(falling back to ``./runs``); every invocation writes into a subdirectory
of it unless ``--out`` gives an explicit path.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from .fabmodel import build_minifab, save_model
from .harness import (
    DEFAULT_HORIZON_HOURS,
    ExperimentConfig,
    cmd_baseline,
    cmd_eval,
    cmd_timing,
    cmd_train,
    resolve_model,
    resume_es_training,
)


def _out_dir(args, name: str) -> str:
    if args.out:
        return args.out
    root = os.environ.get("FABRL_OUT", "runs")
    return str(Path(root) / f"{name}-{time.strftime('%Y%m%d-%H%M%S')}")


def _seed_list(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.split(",") if s != "")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="builtin:minifab",
                   help="builtin:minifab, builtin:midifab, or a model file path")
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--dispatch", default=None, help="baseline rule (default: model's)")
    p.add_argument("--horizon-days", type=float, default=None)
    p.add_argument("--horizon-hours", type=float, default=None)
    p.add_argument("--seeds", type=_seed_list, default=(0,), help="training seeds, comma separated")
    p.add_argument("--test-seeds", type=_seed_list, default=(100, 101, 102, 103, 104))
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: CPU count)")
    p.add_argument("--out", default=None)


def _config(args, **overrides) -> ExperimentConfig:
    horizon = DEFAULT_HORIZON_HOURS
    if args.horizon_hours is not None:
        horizon = args.horizon_hours
    elif args.horizon_days is not None:
        horizon = args.horizon_days * 24.0
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    return ExperimentConfig(
        model=args.model,
        model_seed=args.model_seed,
        dispatch=args.dispatch,
        train_seeds=args.seeds,
        test_seeds=args.test_seeds,
        horizon_hours=horizon,
        workers=workers,
        **overrides,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fabrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("baseline", help="run the heuristic sweep")
    _add_common(p)
    p.add_argument("--rules", default=None,
                   help="comma-separated rules (default: the five standard ones)")

    p = sub.add_parser("train", help="train a dispatching policy")
    _add_common(p)
    p.add_argument("--optimizer", choices=("cmaes", "ppo"), default="cmaes")
    p.add_argument("--control", default="litho",
                   help="comma-separated tool groups, or 'all'")
    p.add_argument("--iterations", type=int, default=40)
    p.add_argument("--popsize", type=int, default=16)
    p.add_argument("--n-best", type=int, default=8)
    p.add_argument("--sigma0", type=float, default=0.5)
    p.add_argument("--cost-variant", choices=("standard", "industry"), default="standard")
    p.add_argument("--reward", choices=("A", "B", "C", "D"), default="D")
    p.add_argument("--reward-span", type=int, choices=(1, 24), default=24)
    p.add_argument("--truncated-episodes", action="store_true",
                   help="PPO: update from fragments instead of complete episodes")
    p.add_argument("--resume", default=None, help="path to a cmaes_state.npz checkpoint")

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("--control", default="litho")
    p.add_argument("--scenarios", default="base", help="held-out scenario names")
    p.add_argument("--train-scenarios", default="base")

    p = sub.add_parser("timing", help="measure ES scaling over worker counts")
    _add_common(p)
    p.add_argument("--control", default="all")
    p.add_argument("--worker-counts", type=_seed_list, default=(1, 4))
    p.add_argument("--iterations", type=int, default=3)

    p = sub.add_parser("emit-model", help="write a model file")
    p.add_argument("--model", default="builtin:minifab")
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("output")

    args = parser.parse_args(argv)

    if args.command == "baseline":
        cfg = _config(args, out_dir=_out_dir(args, "baseline"))
        rules = tuple(args.rules.split(",")) if args.rules else None
        rows = cmd_baseline(cfg, rules)
        print(f"{'rule':<12}{'wafers':>10}{'tardiness':>14}{'wafers%':>10}{'tard%':>10}")
        for r in rows:
            print(
                f"{r['rule']:<12}{r['median_completed_wafers']:>10.0f}"
                f"{r['median_tardiness']:>14.1f}{r['completed_wafers_norm']:>10.1f}"
                f"{r['tardiness_norm']:>10.1f}"
            )
        print(f"outputs in {cfg.out_dir}")
        return 0

    if args.command == "train":
        control = ("all",) if args.control == "all" else tuple(args.control.split(","))
        cfg = _config(
            args,
            optimizer=args.optimizer,
            controlled=control,
            iterations=args.iterations,
            popsize=args.popsize,
            n_best=args.n_best,
            sigma0=args.sigma0,
            cost_variant=args.cost_variant,
            reward_variant=args.reward,
            reward_span=args.reward_span,
            ppo_complete_episodes=not args.truncated_episodes,
            out_dir=_out_dir(args, f"train-{args.optimizer}"),
        )
        if args.resume:
            result = resume_es_training(cfg, args.resume)
        else:
            result = cmd_train(cfg)
        rows = result.log_rows
        if rows:
            last = rows[-1]
            print(
                f"finished after {len(rows)} iterations;"
                f" last tardiness improvement {last['tardiness_vs_ref_pct']:.1f} %,"
                f" throughput {last['throughput_vs_ref_pct']:.1f} %"
            )
        print(f"outputs in {cfg.out_dir}")
        return 0

    if args.command == "eval":
        control = ("all",) if args.control == "all" else tuple(args.control.split(","))
        cfg = _config(
            args,
            controlled=control,
            test_scenarios=tuple(args.scenarios.split(",")),
            train_scenarios=tuple(args.train_scenarios.split(",")),
            out_dir=_out_dir(args, "eval"),
        )
        rows = cmd_eval(args.checkpoint, cfg)
        print(f"{'scenario':<12}{'seed':>6}{'train':>7}{'tard%':>9}{'tp%':>8}")
        for r in rows:
            print(
                f"{r['scenario']:<12}{r['seed']:>6}{str(r['in_training']):>7}"
                f"{r['tardiness_impr_pct']:>9.1f}{r['throughput_impr_pct']:>8.1f}"
            )
        print(f"outputs in {cfg.out_dir}")
        return 0

    if args.command == "timing":
        control = ("all",) if args.control == "all" else tuple(args.control.split(","))
        cfg = _config(args, controlled=control, out_dir=_out_dir(args, "timing"))
        rows = cmd_timing(cfg, worker_counts=args.worker_counts, iterations=args.iterations)
        for r in rows:
            print(
                f"workers={r['workers']}: {r['seconds_per_iteration']:.2f} s/iteration"
                f" ({r['total_seconds']:.1f} s total)"
            )
        print(f"outputs in {cfg.out_dir}")
        return 0

    if args.command == "emit-model":
        if args.model == "builtin:minifab":
            model = build_minifab(args.model_seed)
        else:
            cfg = ExperimentConfig(model=args.model, model_seed=args.model_seed)
            model = resolve_model(cfg)
        save_model(model, args.output)
        print(f"wrote {args.output}")
        return 0

    parser.error(f"unknown command {args.command!r}")
    return 2


if __name__ == "__main__":
    sys.exit(main())
