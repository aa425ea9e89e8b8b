"""Quantizer sweep on a sigma-logit softmax corpus: MSE and decile profile per bitwidth.

    python scripts/sweep_quantizers.py --out results/sweep.csv
"""

import argparse
import csv

from dopq.experiments import SWEEP_BITS, SWEEP_COLUMNS, default_softmax_corpus, sweep_checks, sweep_quantizers


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--sigma", type=float, default=3.0)
    ap.add_argument("--out", default="sweep.csv")
    args = ap.parse_args()
    rows = sweep_quantizers(default_softmax_corpus(args.seed, args.rows, sigma=args.sigma), SWEEP_BITS)
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['quantizer']:>9} b={r['bitwidth']}: mse {r['mse']:.3e}  max {r['max_err']:.3e}")
    chk = sweep_checks(rows)
    print("b=4 TanQ <= " + ", ".join(f"{k} {'yes' if ok else 'no'}" for k, ok in chk["tanq_le"].items()))


if __name__ == "__main__":
    main()
