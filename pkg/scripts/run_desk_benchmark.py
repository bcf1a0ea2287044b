#!/usr/bin/env python3
"""Run the desk-scale method comparison and print the results table.

Covers the three regimes at K2=100 over the synthetic world, plus the
data-size trend cells for the joint regime. Results are checkpointed per run
under the output directory, so interrupted sweeps resume where they left off.

    python scripts/run_desk_benchmark.py --out results_desk --workers 2
"""

import argparse
import sys
import time

from twostage_cltr.experiment import desk_preset, render_table, run_grid


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results_desk")
    parser.add_argument("--workers", type=int, default=2)
    parser.add_argument("--seed", type=int, default=17)
    parser.add_argument("--runs", type=int, default=5)
    parser.add_argument("--full", action="store_true",
                        help="all K2 x N cells instead of the comparison subset")
    args = parser.parse_args()

    config = desk_preset(out_dir=args.out, workers=args.workers,
                         master_seed=args.seed, n_runs=args.runs)
    if args.full:
        cells = None
    else:
        cells = [(r, 100, 100_000) for r in config.regimes]
        cells += [("joint", 100, 25_000), ("joint", 100, 50_000)]

    t0 = time.time()
    grid = run_grid(config, cells=cells)
    print(render_table(grid))
    print(f"finished in {(time.time() - t0) / 60:.1f} min; results in {config.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
