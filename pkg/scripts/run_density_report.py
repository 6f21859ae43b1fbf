#!/usr/bin/env python3
"""Density and flow reports for one configuration: truncation profile table,
mean-path/defect/flow-gap tables, and the series transition density with its
per-term diagnostics."""
import argparse
import sys
from pathlib import Path

from sadl.cli import main as sadl_main

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(ROOT / "configs" / "linear_beta1.cfg"))
    ap.add_argument("--out", default="out_density")
    args = ap.parse_args()
    for cmd in ("truncation-report", "flows-report", "parametrix"):
        rc = sadl_main([cmd, "--config", args.config, "--out", args.out])
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
