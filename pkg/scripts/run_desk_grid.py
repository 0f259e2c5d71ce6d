"""Run the desk-scale labeling-strategy grid and print the aggregate table.

Both labeling modes, budgets 1/2/4/8, three repetitions per cell.  On a
commodity CPU the full grid takes on the order of an hour; pass --workers to
parallelize cells, or rerun the same command to resume an interrupted grid.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from volseg.evaluation import read_aggregate_csv
from volseg.experiment import ExperimentConfig, run_experiment


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="experiment output directory")
    parser.add_argument("--master-seed", type=int, default=7)
    parser.add_argument("--budgets", type=int, nargs="+", default=[1, 2, 4, 8])
    parser.add_argument("--repetitions", type=int, default=3)
    parser.add_argument("--workers", type=int, default=1)
    args = parser.parse_args()

    config = ExperimentConfig(
        out_dir=args.out,
        master_seed=args.master_seed,
        budgets=tuple(args.budgets),
        repetitions=args.repetitions,
        workers=args.workers,
    )
    agg_path = run_experiment(config, log=lambda msg: print(msg, flush=True))
    print(f"\naggregate: {agg_path}")
    rows = read_aggregate_csv(agg_path)
    print(f"{'mode':<13} {'m':>3} {'class':<12} {'mean':>7} {'ci95':>7} {'n':>4}")
    for r in rows:
        flag = " (low n)" if r.low_n else ""
        print(f"{r.mode:<13} {r.m:>3} {r.cls:<12} {r.mean_dice:>7.4f} {r.ci95_half_width:>7.4f} {r.n:>4}{flag}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
