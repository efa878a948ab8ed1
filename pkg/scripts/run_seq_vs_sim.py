#!/usr/bin/env python3
"""Compare simple and sequential ensembles for N in 1..4 at desk scale.

Writes seq_vs_sim.csv (columns: mode, N, miou) to the output directory.
"""

import argparse

from seqens.recipes import reproduce_figure


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/seq_vs_sim")
    args = parser.parse_args()
    reproduce_figure("seq_vs_sim", args.out)
    print(f"wrote {args.out}/seq_vs_sim.csv")


if __name__ == "__main__":
    main()
