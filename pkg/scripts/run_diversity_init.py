#!/usr/bin/env python3
"""Member similarity under random vs warm-start initialization.

Writes diversity_init.csv (columns: init, i, j, pred_cosine, param_cosine)
to the output directory; the `mean,offdiag` rows summarize each block.
"""

import argparse

from seqens.recipes import reproduce_figure


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results/diversity_init")
    args = parser.parse_args()
    reproduce_figure("diversity_init", args.out)
    print(f"wrote {args.out}/diversity_init.csv")


if __name__ == "__main__":
    main()
