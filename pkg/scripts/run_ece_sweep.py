#!/usr/bin/env python3
"""Temperature sweep for a single trained model, reporting ECE per T.

Writes ece_sweep.csv (columns: T, ece; final row marks the best T) to the
output directory.
"""

import argparse

from seqens.recipes import reproduce_figure


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/ece_sweep")
    args = parser.parse_args()
    reproduce_figure("ece_sweep", args.out)
    print(f"wrote {args.out}/ece_sweep.csv")


if __name__ == "__main__":
    main()
