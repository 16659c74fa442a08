#!/usr/bin/env python3
"""Run one experiment family from a profile or config file, then report and verify it.

    python3 scripts/run_experiment.py rewind --profile desk --out results/rewind
    python3 scripts/run_experiment.py baseline --config my.yaml
"""

import argparse
import logging
import sys

from collatz_lab import runner
from collatz_lab.config import EXPERIMENT_KINDS, ExperimentConfig, apply_overrides, desk_profile, paper_profile


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("kind", choices=EXPERIMENT_KINDS)
    ap.add_argument("--profile", choices=("desk", "paper"), default="desk")
    ap.add_argument("--config", help="YAML/JSON config; its kind must match")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out")
    ap.add_argument("--force", action="store_true")
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if cfg.kind != args.kind:
            ap.error(f"config kind {cfg.kind!r} does not match {args.kind!r}")
    else:
        cfg = (desk_profile if args.profile == "desk" else paper_profile)(args.kind)
    cfg = apply_overrides(cfg, args.set)

    root = runner.run(cfg, out=args.out, force=args.force, workers=args.workers)
    for name, path in runner.report(root).items():
        print(f"{name}: {path}")
    rep = runner.verify(root)
    print(f"verify: {'ok' if rep.ok else 'FAILED'}")
    return 0 if rep.ok else 4


if __name__ == "__main__":
    sys.exit(main())
