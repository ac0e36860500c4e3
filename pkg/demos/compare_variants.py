"""Compare every framework variant on the default and high-shift traces.

    python demos/compare_variants.py [--devices 1,8] [--seeds 0,1,2]
"""
import argparse
from pathlib import Path

from edgeadapt.config import VARIANTS, load_config
from edgeadapt.harness import expand_matrix, run_matrix, summary_table

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--devices", default="1,8")
    ap.add_argument("--seeds", default="0")
    args = ap.parse_args()
    devices = [int(d) for d in args.devices.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    for name in ("default.json", "high_shift.json"):
        base = load_config(CONFIGS / name)
        rows, _ = run_matrix(expand_matrix(base, VARIANTS, devices, seeds))
        print(f"== {name}")
        print(summary_table(rows))
        print()


if __name__ == "__main__":
    main()
