#!/usr/bin/env python3
"""
Write a synthetic raw survey extract for tests and demos.

Draws rows from the built-in survey marginals (or the planted-signal mode),
saves them as a raw CSV and prints the class balance and the per-province
rates so the file can be sanity-checked before it is committed.

Usage:
    python scripts/make_fixture.py [--n 200] [--seed 7] [--mode marginal] [--output file.csv]
"""
import argparse
import sys
from datetime import datetime
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from nutriscreen.const import DEFAULT_SYNTH_SEED
from nutriscreen.errors import NutriscreenError
from nutriscreen.preprocess import derive_labels, province_prevalence
from nutriscreen.synth import MODE_MARGINAL, MODE_PLANTED, SynthRequest


def main():
    parser = argparse.ArgumentParser(
        description="Write a synthetic raw survey CSV"
    )
    parser.add_argument(
        "--n", "-n",
        type=int,
        default=200,
        help="Number of children (default: 200)"
    )
    parser.add_argument(
        "--seed", "-s",
        type=int,
        default=DEFAULT_SYNTH_SEED,
        help=f"Generator seed (default: {DEFAULT_SYNTH_SEED})"
    )
    parser.add_argument(
        "--mode", "-m",
        choices=(MODE_MARGINAL, MODE_PLANTED),
        default=MODE_MARGINAL,
        help="Label model (default: marginal)"
    )
    parser.add_argument(
        "--output", "-o",
        default=None,
        help="Output CSV (default: tests/fixtures/synth_<timestamp>.csv)"
    )

    args = parser.parse_args()

    if args.output is None:
        fixtures_dir = Path(__file__).parent.parent / "tests" / "fixtures"
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        output_path = fixtures_dir / f"synth_{timestamp}.csv"
    else:
        output_path = Path(args.output)
    output_path.parent.mkdir(parents=True, exist_ok=True)

    print(f"Drawing {args.n} rows ({args.mode}, seed {args.seed})...")
    try:
        frame = SynthRequest(n=args.n, seed=args.seed, mode=args.mode).run()
        labels = derive_labels(frame)
        provinces = province_prevalence(frame)
    except NutriscreenError as e:
        print(f"\nError: {e}")
        sys.exit(1)

    frame.to_csv(output_path, index=False, lineterminator="\n")

    print(f"\nSaved to: {output_path}")
    print(f"Malnourished: {int(labels['malnutrition'].sum())} of {len(frame)}")
    for column in ("underweight", "stunted", "wasted"):
        print(f"  {column:<12} {labels[column].mean():.3f}")
    print("\nPer province:")
    for row in provinces.itertuples(index=False):
        print(f"  {row.province:<14} n={row.n:<5} rate={row.malnutrition:.3f}")


if __name__ == "__main__":
    main()
