"""Grid the two architecture knobs: encoder split depth and expansion width.

Each cell is a full continual run; the table shows op with bwt in
parentheses. Lower splits hand the router shallower features, wider
expansions give it more room to separate tasks.

Usage: python3 scripts/sweep_split_expansion.py [--splits 1,2,3] [--widths 64,128,256]
"""

import argparse

from adaroute.config import default_config
from adaroute.harness import run_sweep
from adaroute.reporting import format_sweep_table


def int_list(text):
    return tuple(int(v) for v in text.split(","))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--splits", type=int_list, default=(1, 2, 3))
    ap.add_argument("--widths", type=int_list, default=(64, 128, 256))
    args = ap.parse_args()

    config = default_config()
    grid = run_sweep(config, split_layers=args.splits, expansions=args.widths)
    print(format_sweep_table(grid, args.splits, args.widths))


if __name__ == "__main__":
    main()
