#!/usr/bin/env python3
"""Validation RMSE and wall time of lock-free training for several thread counts."""
import argparse
import os
import statistics
import tempfile
import time

from factorbird import dataprep
from factorbird.edges import write_edges
from factorbird.evaluation import holdout_rmse, load_model
from factorbird.model import HyperGrid, Hyperparameters
from factorbird.pipeline import RunConfig, run_local
from factorbird.synthetic import SyntheticSpec, biased_low_rank


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--threads", default="1,2,4")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--passes", type=int, default=15)
    p.add_argument("--workdir")
    args = p.parse_args()
    counts = [int(x) for x in args.threads.split(",")]
    grid = HyperGrid((Hyperparameters(0.02, 0.05, 0.95, k=5),))
    root = args.workdir or tempfile.mkdtemp(prefix="hogwild-")

    rmse = {t: [] for t in counts}
    seconds = {t: [] for t in counts}
    for seed in range(args.seeds):
        d = os.path.join(root, f"seed{seed}")
        os.makedirs(d, exist_ok=True)
        write_edges(os.path.join(d, "all.fbed"),
                    biased_low_rank(SyntheticSpec(density=0.1, noise=0.2), seed))
        dataprep.prepare(os.path.join(d, "all.fbed"), os.path.join(d, "prep"), seed=seed)
        for t in counts:
            cfg = RunConfig(os.path.join(d, "prep"), os.path.join(d, f"model-{t}"), grid,
                            passes=args.passes, threads=t, seed=seed, init_stddev=0.1)
            t0 = time.perf_counter()
            run_local(cfg)
            seconds[t].append(time.perf_counter() - t0)
            U, V, g, _, _ = load_model(cfg.out_dir)
            rmse[t].append(float(holdout_rmse(os.path.join(cfg.prep_dir, "validation.fbed"),
                                              U, V, g, grid)[0]))
            print(f"seed {seed} threads {t}: validation RMSE {rmse[t][-1]:.4f} "
                  f"in {seconds[t][-1]:.1f}s")

    base = statistics.median(rmse[counts[0]])
    print("\nthreads  median RMSE  vs first  median seconds")
    for t in counts:
        m = statistics.median(rmse[t])
        print(f"{t:>7}  {m:11.4f}  {(m - base) / base:+8.2%}  {statistics.median(seconds[t]):14.1f}")


if __name__ == "__main__":
    main()
