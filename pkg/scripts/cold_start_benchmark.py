"""Cold-start benchmark: full model vs its no_rqvae and no_ara ablations over several seeds.

    python scripts/cold_start_benchmark.py --seeds 0 1 2 3 4 --out results/benchmark.tsv
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from motorec.experiments import BENCHMARK_TRAIN, cold_start_benchmark

METRICS = ("R@20", "N@20", "R@10", "N@10")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", nargs="+", default=["full", "no_rqvae", "no_ara"])
    ap.add_argument("--epochs", type=int, default=BENCHMARK_TRAIN.max_epochs)
    ap.add_argument("--out", type=Path, help="optional TSV with one row per (seed, variant)")
    args = ap.parse_args(argv)

    def show(row):
        cold = "  ".join(f"{k}={row.cold[k]:.4f}" for k in ("R@20", "N@20"))
        print(f"seed {row.seed} {row.variant:<10} cold {cold}  overall R@20={row.overall['R@20']:.4f}  "
              f"best epoch {row.best_epoch}  {row.seconds:.0f}s", flush=True)

    cfg = BENCHMARK_TRAIN.replace(max_epochs=args.epochs)
    res = cold_start_benchmark(args.seeds, args.variants, cfg=cfg, log=show)

    print("\nmean over seeds (cold / overall)")
    for v in args.variants:
        parts = [f"{m} {np.mean(list(res.metric(v, m).values())):.4f}/{np.mean(list(res.metric(v, m, 'overall').values())):.4f}" for m in METRICS]
        print(f"  {v:<10} " + "  ".join(parts))
    if "full" in args.variants:
        for rival, metric in (("no_rqvae", "R@20"), ("no_ara", "N@20")):
            if rival in args.variants:
                print(f"full beats {rival} on cold {metric} in {res.wins('full', rival, metric)}/{len(args.seeds)} seeds")
    print(f"total {res.seconds:.0f}s")

    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with args.out.open("w", encoding="utf-8") as fh:
            fh.write("seed\tvariant\tstratum\t" + "\t".join(METRICS) + "\n")
            for r in res.rows:
                for stratum in ("overall", "cold"):
                    vals = getattr(r, stratum)
                    fh.write(f"{r.seed}\t{r.variant}\t{stratum}\t" + "\t".join(f"{vals[m]:.6f}" for m in METRICS) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
