#!/usr/bin/env python3
"""Train the CMA-ES dispatching policy on all Minifab tools, then evaluate
the frozen result on held-out seeds (the long acceptance protocol)."""

import argparse
import sys

sys.path.insert(0, "src")

from fabrl.harness import ExperimentConfig, cmd_eval, cmd_train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iterations", type=int, default=200)
    ap.add_argument("--workers", type=int, default=2)
    ap.add_argument("--control", default="all")
    ap.add_argument("--out", default="runs/minifab-es")
    args = ap.parse_args()

    control = ("all",) if args.control == "all" else tuple(args.control.split(","))
    cfg = ExperimentConfig(
        controlled=control,
        iterations=args.iterations,
        workers=args.workers,
        sigma0=0.2,  # exploration stays near the baseline-equivalent start
        out_dir=args.out,
    )
    result = cmd_train(cfg)
    print(f"best cost {result.best_cost:.4f}; log rows {len(result.log_rows)}")
    rows = cmd_eval(f"{args.out}/best_params.npz", cfg)
    for r in rows:
        tag = "train" if r["in_training"] else "test"
        print(
            f"{tag:5s} scenario={r['scenario']} seed={r['seed']}"
            f" tardiness {r['tardiness_impr_pct']:+.1f}%"
            f" throughput {r['throughput_impr_pct']:+.2f}%"
        )


if __name__ == "__main__":
    main()
