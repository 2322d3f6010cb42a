"""Run the acceptance checks and print their PASS/FAIL lines.

    python scripts/reproduce_acceptance.py                 # shortened chains (about 35 min on one core)
    python scripts/reproduce_acceptance.py --full          # 500 burn-in / 1000 draws
    python scripts/reproduce_acceptance.py --cache .acc    # keep per-replicate metrics between runs
"""

import argparse
import os
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--full", action="store_true", help="use the default chain length")
    ap.add_argument("--cache", type=Path, default=None, help="directory for cached replicate metrics")
    ap.add_argument("-k", default=None, help="pytest -k expression to select checks")
    args = ap.parse_args()
    env = dict(os.environ)
    env["BCFIV_ACCEPTANCE_PROFILE"] = "full" if args.full else "desk"
    if args.cache:
        env["BCFIV_ACCEPTANCE_CACHE"] = str(args.cache.resolve())
    cmd = [sys.executable, "-m", "pytest", str(ROOT / "tests" / "test_acceptance.py"), "-q", "-rN"]
    if args.k:
        cmd += ["-k", args.k]
    return subprocess.call(cmd, env=env, cwd=ROOT)


if __name__ == "__main__":
    sys.exit(main())
