#!/usr/bin/env python3
"""Test RMSE of increasingly rich models on biased low-rank synthetic data.

All four model kinds (global bias only, plus vertex biases, rank 2, rank 5)
share one packed k=5 run per seed; each kind picks its regularisation on the
validation split. Prints per-seed and median test RMSE.
"""
import argparse
import os
import statistics
import tempfile
import time

from factorbird import dataprep
from factorbird.edges import write_edges
from factorbird.evaluation import holdout_rmse, load_model, select_best
from factorbird.model import HyperGrid, Hyperparameters
from factorbird.pipeline import RunConfig, run_local
from factorbird.synthetic import SyntheticSpec, biased_low_rank

KINDS = (("global", dict(rank=0, learn_biases=False)), ("biases", dict(rank=0)),
         ("k=2", dict(rank=2)), ("k=5", dict(rank=5)))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--passes", type=int, default=15)
    p.add_argument("--eta", type=float, default=0.02)
    p.add_argument("--decay", type=float, default=0.95)
    p.add_argument("--lambdas", default="0.02,0.1")
    p.add_argument("--workdir", help="keep intermediate files here (default: temp dir)")
    args = p.parse_args()
    lambdas = [float(x) for x in args.lambdas.split(",")]
    grid = HyperGrid(tuple(Hyperparameters(args.eta, lam, args.decay, k=5, **kw)
                           for lam in lambdas for _, kw in KINDS))

    root = args.workdir or tempfile.mkdtemp(prefix="complexity-")
    results = {name: [] for name, _ in KINDS}
    for seed in range(args.seeds):
        t0 = time.perf_counter()
        d = os.path.join(root, f"seed{seed}")
        os.makedirs(d, exist_ok=True)
        write_edges(os.path.join(d, "all.fbed"),
                    biased_low_rank(SyntheticSpec(density=0.1, noise=0.2), seed))
        dataprep.prepare(os.path.join(d, "all.fbed"), os.path.join(d, "prep"), seed=seed)
        cfg = RunConfig(os.path.join(d, "prep"), os.path.join(d, "model"), grid,
                        passes=args.passes, seed=seed, init_stddev=0.1,
                        fetch_batch_size=2048)
        run_local(cfg)
        U, V, g, _, _ = load_model(cfg.out_dir)
        val = holdout_rmse(os.path.join(cfg.prep_dir, "validation.fbed"), U, V, g, grid)
        test = holdout_rmse(os.path.join(cfg.prep_dir, "test.fbed"), U, V, g, grid)
        row = []
        for q, (name, _) in enumerate(KINDS):
            members = [q + len(KINDS) * r for r in range(len(lambdas))]
            best, _ = select_best(val[members])
            results[name].append(float(test[members[best]]))
            row.append(f"{name} {results[name][-1]:.4f}")
        print(f"seed {seed}: " + ", ".join(row) + f"  ({time.perf_counter() - t0:.1f}s)")

    print("\nmedian test RMSE")
    for name, _ in KINDS:
        print(f"  {name:<8} {statistics.median(results[name]):.4f}")


if __name__ == "__main__":
    main()
