"""Post-Softmax quantizer ablation at 3-bit activations over several seeds.

    python scripts/ablation_tanq.py --seeds 0,1,2,3,4 --out results/tanq.csv
"""

import argparse
import csv
from dataclasses import replace

from dopq.experiments import ABLATION_KINDS, TANQ_EXPERIMENT, ablation_tanq, tanq_verdicts


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--bits-a", type=int, default=3)
    ap.add_argument("--attention-sigma", type=float, default=TANQ_EXPERIMENT.attention_sigma)
    ap.add_argument("--out", default="ablation_tanq.csv")
    args = ap.parse_args()
    cfg = replace(TANQ_EXPERIMENT, attention_sigma=args.attention_sigma or None)
    rows = ablation_tanq([int(s) for s in args.seeds.split(",")], cfg, bits_a=args.bits_a)
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    seeds = sorted({r["seed"] for r in rows})
    print("seed  " + "  ".join(f"{ABLATION_KINDS.get(k, k):>8}" for k in list(ABLATION_KINDS) + ["control"]))
    for s in seeds:
        a = {r["quantizer"]: r["agreement"] for r in rows if r["seed"] == s}
        print(f"{s:>4}  " + "  ".join(f"{a[k]:8.4f}" for k in list(ABLATION_KINDS) + ["control"]))
    wins = sum(v["tanq>=log2"] for v in tanq_verdicts(rows).values())
    print(f"TanQ >= LogQ on {wins}/{len(seeds)} seeds")


if __name__ == "__main__":
    main()
