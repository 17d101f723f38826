"""Train the tokenizer alone with and without the sparsity term; compare code-usage entropy.

    python scripts/sparsity_entropy.py --seeds 0 1 2 3 4 --gamma 0.2
"""
from __future__ import annotations

import argparse
import time

from motorec.config import TrainConfig
from motorec.experiments import sparsity_experiment


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--items", type=int, default=1000)
    ap.add_argument("--gamma", type=float, default=0.2)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--rho", type=float, default=0.05)
    ap.add_argument("--codebook-size", type=int, default=256)
    ap.add_argument("--stages", type=int, default=4)
    args = ap.parse_args(argv)
    cfg = TrainConfig(rho=args.rho, codebook_size=args.codebook_size, n_stages=args.stages)
    t0 = time.perf_counter()
    trials = sparsity_experiment(args.seeds, args.gamma, args.items, args.epochs, cfg)
    for t in trials:
        verdict = "lower" if t.lowered else "not lower"
        print(f"seed {t.seed}: entropy gamma=0 {t.entropy_plain:.4f}  gamma={args.gamma:g} {t.entropy_sparse:.4f}  {verdict}")
    print(f"lower in {sum(t.lowered for t in trials)}/{len(trials)} seeds, {time.perf_counter() - t0:.1f}s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
