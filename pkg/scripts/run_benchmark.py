"""Synthetic recovery benchmark: one run per (shots, stages, K) combination.

    python3 scripts/run_benchmark.py --shots 8 16 32 --targets 100
    python3 scripts/run_benchmark.py --stages 1 3 --num-init 1 3 --symmetry 0.9
"""

import argparse
import json
import logging

from cascade_pose.experiments import benchmark_dataset, run
from cascade_pose.pipeline import EstimatorConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--targets", type=int, default=100)
    ap.add_argument("--symmetry", type=float, default=0.0)
    ap.add_argument("--shots", type=int, nargs="+", default=[32])
    ap.add_argument("--stages", type=int, nargs="+", default=[3])
    ap.add_argument("--num-init", type=int, nargs="+", default=[3])
    ap.add_argument("--sweeps", type=int, default=2)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    ds = benchmark_dataset(args.seed, args.targets, args.symmetry)
    for shots in args.shots:
        for n_stages in args.stages:
            for k in args.num_init:
                cfg = EstimatorConfig(num_init=k, n_stages=n_stages, sweeps=args.sweeps)
                res = run(ds, shots, cfg)
                row = {"stages": n_stages, "K": k, **res.summary(),
                       "stagewise_nonincreasing": res.stagewise_nonincreasing()}
                print(json.dumps({k_: round(v, 4) if isinstance(v, float) else v for k_, v in row.items()}), flush=True)


if __name__ == "__main__":
    main()
