"""Exact exponent table over a (d, q) grid; prints the tightest margin per row."""
import argparse
from collections import defaultdict
from fractions import Fraction

from convexint.ledger import feasible_parameters, sweep, table_to_csv

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d", type=int, nargs="+", default=[3, 4, 5])
    ap.add_argument("--q", nargs="+", default=["3/2", "2", "3"])
    ap.add_argument("--csv", help="write the full table here")
    args = ap.parse_args()
    qs = [Fraction(q) for q in args.q]
    for d in args.d:
        for q in qs:
            print(f"delta({d}, {q}) = {feasible_parameters(d, q).delta}")
    rows = sweep(args.d, qs)
    tight = defaultdict(lambda: None)
    for r in rows:
        key = r.row.name
        if tight[key] is None or r.margin < tight[key]:
            tight[key] = r.margin
    width = max(len(k) for k in tight)
    for name, m in sorted(tight.items(), key=lambda kv: kv[1]):
        print(f"{name:<{width}}  min margin {float(m):.6g}")
    if args.csv:
        table_to_csv(rows, args.csv)
    print(f"{len(rows)} rows, all strictly positive")
