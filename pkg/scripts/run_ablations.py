"""Run every ablation axis from one config and print the comparison tables.

    python3 scripts/run_ablations.py configs/desk.toml --out runs/ablate
"""
import argparse
import json
from pathlib import Path

from ascnet.cli import AXES, main as cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("config")
    ap.add_argument("--out", default="runs/ablate")
    ap.add_argument("--axis", action="append", choices=AXES, help="repeatable; default all")
    args = ap.parse_args()

    for axis in args.axis or AXES:
        if cli(["ablate", args.config, "--out", args.out, "--axis", axis]) != 0:
            raise SystemExit(f"ablate --axis {axis} failed")
        report = json.loads(Path(args.out, f"ablate_{axis}.json").read_text())
        cols = report["columns"]
        print(f"\n== {axis} ==")
        print(" | ".join(cols))
        for row in report["rows"]:
            print(" | ".join(f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in cols))


if __name__ == "__main__":
    main()
