# scripts/inspect_dataset.py
"""
Print the head of an input CSV and its per-arm counts.
- Usage: python scripts/inspect_dataset.py data/scenario.csv [--outcome y] [--treatment w]
"""

import argparse
import sys
from pathlib import Path

import pandas as pd

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from modules.cli import RunConfig, parse_input  # noqa: E402
from modules.errors import DrmatchError  # noqa: E402


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Show the head and arm counts of a drmatch input CSV.")
    parser.add_argument("path")
    parser.add_argument("--outcome", default="y")
    parser.add_argument("--treatment", default="w")
    parser.add_argument("--rows", type=int, default=10)
    args = parser.parse_args(argv)

    config = RunConfig(command="estimate", input_path=args.path, outcome_col=args.outcome, treatment_col=args.treatment)
    try:
        # any split with both arms present is worth looking at
        dataset = parse_input(args.path, config, min_per_arm=1)
    except DrmatchError as exc:
        print(f"[WARN] {exc}", file=sys.stderr)
        return exc.exit_code

    print(pd.read_csv(args.path).head(args.rows))
    print(f"\nRows: {dataset.n}, covariates: {dataset.x.n_cols}")
    print(f"Treated ({args.treatment}=1): {dataset.n_treated}")
    print(f"Control ({args.treatment}=0): {dataset.n_control}")
    print(f"Outcome mean by arm: treated {dataset.y[dataset.treated].mean():.4f}, "
          f"control {dataset.y[dataset.control].mean():.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
