#!/usr/bin/env python3
"""Train PPO on the Minifab lithography group with complete episodes."""

import argparse
import sys

sys.path.insert(0, "src")

from fabrl.harness import ExperimentConfig, cmd_train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--episodes", type=int, default=40)
    ap.add_argument("--workers", type=int, default=2)
    ap.add_argument("--reward", choices=("A", "B", "C", "D"), default="D")
    ap.add_argument("--reward-span", type=int, choices=(1, 24), default=24)
    ap.add_argument("--truncated", action="store_true")
    ap.add_argument("--out", default="runs/minifab-ppo")
    args = ap.parse_args()

    cfg = ExperimentConfig(
        optimizer="ppo",
        controlled=("litho",),
        iterations=args.episodes,
        workers=args.workers,
        reward_variant=args.reward,
        reward_span=args.reward_span,
        ppo_complete_episodes=not args.truncated,
        out_dir=args.out,
    )
    result = cmd_train(cfg)
    for row in result.log_rows:
        print(
            f"ep {row['iteration']:3d} reward {row['mean_reward']:.3e}"
            f" tardiness {row['tardiness_vs_ref_pct']:+6.1f}%"
            f" throughput {row['throughput_vs_ref_pct']:+5.2f}%"
            f" entropy {row['entropy']:.3f}"
        )


if __name__ == "__main__":
    main()
