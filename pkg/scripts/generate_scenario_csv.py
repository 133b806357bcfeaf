# scripts/generate_scenario_csv.py
"""
Write one simulated dataset as a CSV that `drmatch.py estimate` can read.
- Columns: y, w, X1..XP
- Usage: python scripts/generate_scenario_csv.py --scenario linear31 --n 500 --p 50 --seed 1 --out data/demo.csv
"""

import argparse
import sys
from pathlib import Path

import pandas as pd

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from modules import simulation  # noqa: E402

DEFAULT_OUT = PROJECT_ROOT / "data" / "scenario.csv"


def scenario_frame(name: str, n=None, p=None, sigma2=None, seed: int = 0, replication: int = 0) -> pd.DataFrame:
    spec = simulation.scenario(name, n=n, p=p, sigma2=sigma2, seed=seed)
    dataset, _ = simulation.generate(spec, replication)
    frame = pd.DataFrame(dataset.x.values, columns=list(dataset.covariate_names))
    frame.insert(0, "w", dataset.w)
    frame.insert(0, "y", dataset.y)
    return frame


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Write a simulated scenario dataset as CSV.")
    parser.add_argument("--scenario", choices=tuple(simulation.PRESETS), default="linear31")
    parser.add_argument("--n", type=int, default=None)
    parser.add_argument("--p", type=int, default=None)
    parser.add_argument("--sigma2", type=float, default=None)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--replication", type=int, default=0)
    parser.add_argument("--out", default=str(DEFAULT_OUT))
    args = parser.parse_args(argv)

    frame = scenario_frame(args.scenario, args.n, args.p, args.sigma2, args.seed, args.replication)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format="%.10g")
    print(f"Wrote {len(frame)} rows ({int(frame['w'].sum())} treated) to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
