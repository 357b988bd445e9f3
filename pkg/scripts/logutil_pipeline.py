"""Log-utility example end to end: closed-form control, recursive utility,
necessary residual, perturbation margins and improvement from a flat control.

Thin wrapper around ``mfdefault example-logutil``; prints the summary.
"""
import argparse
import sys
from pathlib import Path

import yaml

from mfdefault.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/logutil.yaml")
    ap.add_argument("--out", default="runs/logutil")
    ap.add_argument("--strict", action="store_true")
    args = ap.parse_args()
    argv = ["example-logutil", "--config", args.config, "--out", args.out] + (["--strict"] if args.strict else [])
    status = cli_main(argv)
    summary = yaml.safe_load((Path(args.out) / "summary.yaml").read_text())
    for c in summary.pop("checks"):
        mark = "ok  " if c["passed"] else "MISS"
        print(f"{mark} {c['name']:32s} {c['value']:.5g} (bound {c['bound']:.5g})")
    for k, v in summary.items():
        print(f"     {k:32s} {v}")
    return status


if __name__ == "__main__":
    sys.exit(main())
