#!/usr/bin/env python
"""Replay the shipped utility events (SRP peak shave on all four ensembles,
APS with pause+resize, CAISO two-step) and print one summary row each.

Outputs for every run (plan, traces, report, plot CSV) go to --out.
"""

import argparse
from pathlib import Path

from gridflex import data_path
from gridflex.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/replays")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    for path in sorted(Path(str(data_path("scenarios"))).glob("*.toml")):
        argv = ["run", str(path), "--out", str(Path(args.out) / path.stem)]
        if args.seed is not None:
            argv += ["--seed", str(args.seed)]
        cli_main(argv)


if __name__ == "__main__":
    main()
