"""One perturbation step on the smoke configuration, with the master identity.

Writes report.json and CSV tables to --out (default runs/smoke). Takes a few
minutes and about 4 GB of memory.
"""
import argparse
import sys
from pathlib import Path

from convexint.cli import main

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "smoke.toml"))
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--dump-fields", action="store_true")
    args = ap.parse_args()
    argv = ["perturb", "--config", args.config, "--out", args.out]
    if args.dump_fields:
        argv.append("--dump-fields")
    sys.exit(main(argv))
