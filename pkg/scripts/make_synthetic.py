#!/usr/bin/env python3
"""Write a synthetic interaction matrix as TSV or FBED.

Example:
    python3 scripts/make_synthetic.py --rows 2000 --cols 1500 --rank 5 --out data.fbed
"""
import argparse

from factorbird.edges import write_edges
from factorbird.synthetic import SyntheticSpec, biased_low_rank, binary_low_rank


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=2000)
    p.add_argument("--cols", type=int, default=1500)
    p.add_argument("--rank", type=int, default=5)
    p.add_argument("--density", type=float, default=0.1)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--binary", action="store_true",
                   help="keep the highest-affinity cells as a=1 instead of real strengths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="*.tsv for text, anything else for FBED")
    args = p.parse_args()

    if args.binary:
        edges = binary_low_rank(args.rows, args.cols, args.rank, args.density, args.seed)
    else:
        spec = SyntheticSpec(rows=args.rows, cols=args.cols, rank=args.rank,
                             density=args.density, noise=args.noise)
        edges = biased_low_rank(spec, args.seed)
    if args.out.endswith(".tsv"):
        with open(args.out, "w") as fh:
            for i, j, a, w in edges.tolist():
                fh.write(f"{i}\t{j}\t{a!r}\t{w!r}\n")
    else:
        write_edges(args.out, edges)
    print(f"wrote {len(edges)} edges to {args.out}")


if __name__ == "__main__":
    main()
