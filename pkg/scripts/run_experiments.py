"""Run the desk-scale reconstruction experiments and print their reports.

    python3 scripts/run_experiments.py sphere mirror_sphere rods_fused rods_coarse
"""

import argparse
import json
import logging

from anisdf.experiments import EXPERIMENTS, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("names", nargs="*", default=list(EXPERIMENTS), choices=list(EXPERIMENTS))
    ap.add_argument("--root", default="runs/acceptance")
    ap.add_argument("--force", action="store_true", help="ignore cached reports and checkpoints")
    ap.add_argument("--steps", type=int, help="shorten training (smoke runs; reports are keyed by config)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    extra = {"steps": args.steps} if args.steps else {}
    for name in args.names:
        print(json.dumps(run_experiment(name, args.root, args.force, **extra), indent=2), flush=True)


if __name__ == "__main__":
    main()
