"""Run every bundled simulation grid (or a chosen subset) into one directory tree.

    python scripts/run_all_grids.py --out runs/ --replicates 50 --jobs 8
    python scripts/run_all_grids.py --only table1 table4 --burn 100 --draws 100

Each grid lands in ``<out>/<name>/``; a final ``tables`` call merges all runs
that share the same axes.
"""

import argparse
import sys
from pathlib import Path

from bcfiv.cli import bundled_scenarios, main


def parse_args(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--only", nargs="*", default=None, help="grid names (default: all bundled)")
    ap.add_argument("--replicates", type=int, default=None)
    ap.add_argument("--jobs", type=int, default=None)
    ap.add_argument("--burn", type=int, default=None)
    ap.add_argument("--draws", type=int, default=None)
    ap.add_argument("--seed", type=int, default=None)
    return ap.parse_args(argv)


def main_(argv=None) -> int:
    args = parse_args(argv)
    names = args.only or bundled_scenarios()
    unknown = sorted(set(names) - set(bundled_scenarios()))
    if unknown:
        print(f"unknown grids: {unknown}", file=sys.stderr)
        return 1
    extra = []
    for flag in ("replicates", "jobs", "burn", "draws", "seed"):
        v = getattr(args, flag)
        if v is not None:
            extra += [f"--{flag}", str(v)]
    failed = []
    for name in names:
        print(f"== {name}", file=sys.stderr)
        if main(["simulate", "--scenario", name, "--out", str(args.out / name), "-v", *extra]) != 0:
            failed.append(name)
    if failed:
        print(f"failed grids: {failed}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main_())
