#!/usr/bin/env python3
"""Network key traffic with V co-located on the learners versus both matrices remote.

Trains a few passes with several column partitions and compares the logged
U and g key traffic with the analytic count for a design that also fetches
and writes one V vector per training event.
"""
import argparse
import os
import tempfile

from factorbird import dataprep
from factorbird.edges import write_edges
from factorbird.model import HyperGrid
from factorbird.pipeline import RunConfig, run_local
from factorbird.synthetic import SyntheticSpec, biased_low_rank


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--partitions", type=int, default=4)
    p.add_argument("--negative-rate", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--passes", type=int, default=2)
    p.add_argument("--workdir")
    args = p.parse_args()
    root = args.workdir or tempfile.mkdtemp(prefix="traffic-")
    write_edges(os.path.join(root, "all.fbed"),
                biased_low_rank(SyntheticSpec(rows=1000, cols=800, density=0.05), 0))
    prep = os.path.join(root, "prep")
    dataprep.prepare(os.path.join(root, "all.fbed"), prep, num_partitions=args.partitions)
    grid = HyperGrid.product([0.02], [0.05, 0.1], k=5)
    cfg = RunConfig(prep, os.path.join(root, "model"), grid, passes=args.passes,
                    negative_rate=args.negative_rate, fetch_batch_size=args.batch_size,
                    init_stddev=0.1)
    reports = run_local(cfg)

    print("pass  events   u keys  g keys  v keys  both-remote  ratio")
    for pass_index in range(args.passes):
        reps = [r[pass_index] for r in reports.values()]
        events = sum(r.positives + r.negatives for r in reps)
        u = sum(r.traffic.count("u") for r in reps)
        g = sum(r.traffic.count("g") for r in reps)
        v = sum(r.traffic.count("v") for r in reps)
        remote = 4 * events  # fetch and write one u and one v vector per event
        print(f"{pass_index:>4}  {events:6d}  {u:7d}  {g:6d}  {v:6d}  {remote:11d}  "
              f"{(u + g + v) / remote:.3f}")


if __name__ == "__main__":
    main()
