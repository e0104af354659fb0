"""Directional benchmark: full run vs Stage-1 baseline vs no-Phase-II, per seed.

    python scripts/benchmark.py --seeds 0 1 2 --out bench.json
"""
import argparse
import json
from dataclasses import asdict

import numpy as np

from scaler.experiments import BENCH_CONFIG, directional_run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out")
    args = ap.parse_args()

    runs = []
    for seed in args.seeds:
        r = directional_run(seed, BENCH_CONFIG)
        runs.append(r)
        print(f"seed {seed} ({r.seconds:.0f}s)")
        for arm in ("stage1", "no_phase2", "full"):
            s, g = getattr(r, arm)["student"], getattr(r, arm)["generalist"]
            print(f"  {arm:10s} student MAE {s['mae']:.4f} F {s['f_beta']:.4f}   generalist MAE {g['mae']:.4f}")
    print("mean")
    for arm in ("stage1", "no_phase2", "full"):
        mae = np.mean([getattr(r, arm)["student"]["mae"] for r in runs])
        f = np.mean([getattr(r, arm)["student"]["f_beta"] for r in runs])
        gm = np.mean([getattr(r, arm)["generalist"]["mae"] for r in runs])
        print(f"  {arm:10s} student MAE {mae:.4f} F {f:.4f}   generalist MAE {gm:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump([asdict(r) for r in runs], fh, indent=2)


if __name__ == "__main__":
    main()
