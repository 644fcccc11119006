#!/usr/bin/env python3
"""Ablation comparison on the overfit corpus: trains each feature/loss variant
with a shared seed and prints the detection/localization ACC/F1 table."""

import argparse
from pathlib import Path

from forgeloc.engine import ablate, render_ablation_table
from run_overfit import ensure_corpus, overfit_config


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--corpus", default="runs/overfit_corpus")
    parser.add_argument("--out", default="runs/ablation")
    parser.add_argument("--variants", default="full,no-dam,no-edge,srm,no-frequency")
    parser.add_argument("--epochs", type=int, default=60)
    parser.add_argument("--seed", type=int, default=5)
    args = parser.parse_args()

    corpus = ensure_corpus(Path(args.corpus))
    cfg = overfit_config(epochs=args.epochs, seed=args.seed)
    rows = ablate(cfg, [v.strip() for v in args.variants.split(",")], corpus, args.out)
    print(render_ablation_table(rows))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
