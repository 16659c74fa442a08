#!/usr/bin/env python3
"""Print local predictability (conditional entropy, bits) of the next output digit per base and branch."""

import argparse

from collatz_lab.analysis import local_predictability
from collatz_lab.numeral import SWEEP_BASES

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--hi", type=int, default=10_000)
ap.add_argument("--window", type=int, default=2)
args = ap.parse_args()

print(f"{'base':>4} {'even':>8} {'odd':>8}")
for b in SWEEP_BASES:
    even = local_predictability(b, "even", hi=args.hi, window=args.window)
    odd = local_predictability(b, "odd", hi=args.hi, window=args.window)
    print(f"{b:>4} {even:8.4f} {odd:8.4f}")
