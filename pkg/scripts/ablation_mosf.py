"""Median vs mean shared factors under injected post-LayerNorm outlier channels, W4A4.

    python scripts/ablation_mosf.py --factors 1,10,50 --out results/mosf.csv
"""

import argparse
import csv

from dopq.experiments import ExperimentConfig, ablation_mosf, mosf_verdicts


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--factors", default="1,10,50")
    ap.add_argument("--bits", type=int, default=4)
    ap.add_argument("--out", default="ablation_mosf.csv")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    factors = [float(f) for f in args.factors.split(",")]
    rows, _ = ablation_mosf(seeds, factors, ExperimentConfig(), bits=args.bits)
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for factor, v in mosf_verdicts(rows).items():
        mse = {(r["seed"], r["scaling"]): r["mean_block_mse"] for r in rows if r["factor"] == factor}
        pairs = "  ".join(f"{mse[(s, 'median')]:.4f}/{mse[(s, 'mean')]:.4f}" for s in seeds)
        print(f"factor {factor:g}: median <= mean on {sum(v.values())}/{len(v)} seeds  (median/mean {pairs})")


if __name__ == "__main__":
    main()
