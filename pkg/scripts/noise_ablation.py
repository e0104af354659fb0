"""Entropy / uncertainty weighting under a noisy generalist.

The generalist is replaced by ground truth whose boundary band has a fraction
of its pixels flipped; each arm reports the student's test MAE.

    python scripts/noise_ablation.py --rate 0.2 --seeds 0 1 2
"""
import argparse

import numpy as np

from scaler.experiments import BENCH_CONFIG, noise_runs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--rate", type=float, default=0.2)
    args = ap.parse_args()

    runs = []
    for seed in args.seeds:
        r = noise_runs(seed, BENCH_CONFIG, rate=args.rate)
        runs.append(r)
        print(f"seed {seed}: " + "  ".join(f"{k} {v:.4f}" for k, v in r.items()), flush=True)
    print("mean:  " + "  ".join(f"{k} {np.mean([r[k] for r in runs]):.4f}" for k in runs[0]))


if __name__ == "__main__":
    main()
