"""Run the numerical lemma suites and print one line per check."""
import argparse
import json
from pathlib import Path

from convexint.suites import GROUPS, SUITES, run_suites

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--suite", default="all", choices=sorted(set(SUITES) | set(GROUPS)))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", type=Path, help="write results here")
    args = ap.parse_args()
    seeded = {"partition", "path-defect", "trace", "antidiv", "trajectory"}
    kwargs = {name: {"seed": args.seed} for name in seeded}
    results = run_suites(args.suite, **kwargs)
    for res in results:
        print(f"[{res.name}] {res.elapsed:.1f} s")
        for c in res.checks:
            print("  " + c.line())
    if args.json:
        args.json.write_text(json.dumps([r.as_dict() for r in results], indent=2, default=float))
    raise SystemExit(0 if all(r.passed for r in results) else 1)
