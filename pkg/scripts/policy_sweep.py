#!/usr/bin/env python
"""Four ensembles x four policy presets at a 25% target.

Prints the comparison table and, per ensemble, which preset touches the
fewest jobs and which keeps the highest average throughput.
"""

import argparse
import csv
import sys
from itertools import groupby

from gridflex import data_path
from gridflex.cli import SWEEP_FIELDS, sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--jobs", type=int, default=4)
    ap.add_argument("--seed", type=int)
    ap.add_argument("-o", "--output", help="also write the table as CSV")
    args = ap.parse_args()

    rows = sweep([str(data_path("sweep"))], all_policies=True, seed=args.seed, jobs=args.jobs)
    if args.output:
        with open(args.output, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
            w.writeheader()
            w.writerows(rows)

    print(f"{'scenario':<18} {'policy':<18} {'impacted':>8} {'avg thr':>8} {'max dev pp':>10} {'rmse %':>7}")
    for r in rows:
        print(f"{r['scenario'].split('@')[0]:<18} {r['policy']:<18} {r['jobs_impacted']:>8} "
              f"{r['avg_throughput']:>8} {r['max_hold_dev_pp']:>10} {r['rmse_percent']:>7}")
    print()
    for name, group in groupby(rows, key=lambda r: r["scenario"].split("@")[0]):
        group = [r for r in group if r["status"] == "ok"]
        fewest = min(int(r["jobs_impacted"]) for r in group)
        best = max(float(r["avg_throughput"]) for r in group)
        print(f"{name}: fewest jobs {fewest} by {[r['policy'] for r in group if int(r['jobs_impacted']) == fewest]}, "
              f"best throughput {best:.4f} by {[r['policy'] for r in group if float(r['avg_throughput']) == best]}")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
