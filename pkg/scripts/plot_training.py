#!/usr/bin/env python3
"""Plot a training-log CSV (improvement percentages over iterations).

Plots are produced from the emitted data files on demand so the package
itself carries no graphics dependencies.

Usage: python3 scripts/plot_training.py runs/*/training_log.csv -o out.png
"""

import argparse
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("logs", nargs="+", help="training_log.csv paths")
    ap.add_argument("-o", "--output", default="training.png")
    args = ap.parse_args()

    fig, (ax_td, ax_tp) = plt.subplots(1, 2, figsize=(11, 4), sharex=True)
    for path in args.logs:
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        xs = [int(r["iteration"]) for r in rows]
        ax_td.plot(xs, [float(r["tardiness_vs_ref_pct"]) for r in rows], label=path)
        ax_tp.plot(xs, [float(r["throughput_vs_ref_pct"]) for r in rows], label=path)
    for ax, title in ((ax_td, "tardiness improvement %"), (ax_tp, "throughput improvement %")):
        ax.axhline(0.0, color="gray", lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_title(title)
        ax.grid(alpha=0.3)
    ax_td.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(args.output, dpi=150)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
