#!/usr/bin/env python3
"""Terminal-density rate sweep: simulate the truncated chain across shifts,
estimate terminal densities, and fit the distance decay. Thin wrapper around
the `sadl rates` pipeline so results land in one place with a manifest."""
import argparse
import sys
from pathlib import Path

from sadl.cli import main as sadl_main

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "linear_beta1.cfg"))
    ap.add_argument("--out", default="out_rates")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--halve", action="store_true")
    args = ap.parse_args()
    argv = ["rates", "--config", args.config, "--out", args.out,
            "--threads", str(args.threads)]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    if args.halve:
        argv.append("--halve")
    return sadl_main(argv)


if __name__ == "__main__":
    sys.exit(main())
