"""Command-line entry point: prep, serve, train, local, eval and export-plot."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import dataprep
from .evaluation import export_plot_data, holdout_rmse, load_model, rmse_report
from .model import HyperGrid
from .pipeline import RunConfig, run_local, run_worker
from .server import ServerConfig, serve

log = logging.getLogger("factorbird")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _add_grid_args(p):
    g = p.add_argument_group("hyperparameter grid")
    g.add_argument("--grid", help="JSON grid file: a list of {eta0, lambda, decay} "
                                  "or {k, combos}")
    g.add_argument("--k", type=int, help="factors per model")
    g.add_argument("--etas", type=_floats, help="comma-separated initial learning rates")
    g.add_argument("--lambdas", type=_floats, help="comma-separated regularisation constants")
    g.add_argument("--decays", type=_floats, default=[1.0],
                   help="comma-separated per-pass learning-rate decays")


def _grid(args) -> HyperGrid:
    if args.grid:
        return HyperGrid.load(args.grid, k=args.k)
    if args.etas and args.lambdas and args.k:
        return HyperGrid.product(args.etas, args.lambdas, args.decays, k=args.k)
    raise UsageError("give --grid FILE or all of --k, --etas and --lambdas")


def _add_train_args(p):
    _add_grid_args(p)
    p.add_argument("--prep", required=True, help="directory written by `prep`")
    p.add_argument("--out", required=True, help="model output directory")
    p.add_argument("--passes", type=_positive_int, default=5)
    p.add_argument("--threads", type=_positive_int, default=1)
    p.add_argument("--negative-rate", type=float, default=0.0,
                   help="synthetic negatives per positive edge")
    p.add_argument("--negative-weight", type=float, default=1.0)
    p.add_argument("--batch-size", type=_positive_int, default=512, help="edges per U fetch block")
    p.add_argument("--stddev", type=float, default=0.01, help="initialisation stddev")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="rerun from a resolved config.json (other flags ignored)")


def _run_config(args, servers=()) -> RunConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = RunConfig.from_json(json.load(fh))
        cfg.out_dir = args.out
        return cfg
    return RunConfig(prep_dir=args.prep, out_dir=args.out, grid=_grid(args),
                     passes=args.passes, threads=args.threads,
                     negative_rate=args.negative_rate, negative_weight=args.negative_weight,
                     fetch_batch_size=args.batch_size, seed=args.seed,
                     init_stddev=args.stddev, servers=list(servers))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="factorbird",
                     description="Parameter-server matrix factorisation with packed grids.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prep", help="split, compute statistics and partition by column")
    p.add_argument("--input", required=True, help="TSV (i, j, a[, w]) or FBED edge file")
    p.add_argument("--ratios", type=_floats, default=[0.8, 0.1, 0.1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--partitions", type=_positive_int, default=1)
    p.add_argument("--binarize", action="store_true", help="set every strength to 1")
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="run a parameter server")
    p.add_argument("--bind", default="127.0.0.1:7070")
    p.add_argument("--width", type=int, required=True, help="slots per vector")
    p.add_argument("--stride", type=int, help="slots per packed model (default: width)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stddev", type=float, default=0.01)
    p.add_argument("--stream-offset", type=int, default=0)

    p = sub.add_parser("train", help="train one partition against parameter servers")
    _add_train_args(p)
    p.add_argument("--servers", required=True, help="comma-separated host:port list")
    p.add_argument("--partition", type=int, default=0)

    p = sub.add_parser("local", help="train all partitions with an in-process store")
    _add_train_args(p)

    p = sub.add_parser("eval", help="hold-out RMSE per packed model")
    p.add_argument("--prep", required=True)
    p.add_argument("--model", required=True, help="model directory from train/local")
    p.add_argument("--split", action="append", choices=["validation", "test"],
                   help="repeatable; default both")
    p.add_argument("--grid", help="optional grid file; must match the model")
    p.add_argument("--out", required=True, help="RMSE report JSON")

    p = sub.add_parser("export-plot", help="write 2-D factor coordinates as TSV")
    p.add_argument("--model", required=True)
    p.add_argument("--model-index", type=int, required=True)
    p.add_argument("--ids", type=lambda s: [int(x) for x in s.split(",") if x],
                   help="comma-separated column ids (default: all exported columns)")
    p.add_argument("--out", required=True)
    return parser


def cmd_prep(args):
    summary = dataprep.prepare(args.input, args.out, tuple(args.ratios), args.seed,
                               args.partitions, args.binarize)
    print(json.dumps(summary["counts"]))


def cmd_serve(args):
    cfg = ServerConfig(width=args.width, bind=args.bind, init_seed=args.seed,
                       init_stddev=args.stddev, stride=args.stride,
                       stream_offset=args.stream_offset)
    handle = serve(cfg)
    print(f"listening on {handle.address}", flush=True)
    try:
        handle.serve_forever()
    except KeyboardInterrupt:
        handle.shutdown()


def cmd_train(args):
    cfg = _run_config(args, servers=args.servers.split(","))
    run_worker(cfg, args.partition)


def cmd_local(args):
    cfg = _run_config(args)
    cfg.servers = []
    run_local(cfg)


def cmd_eval(args):
    U, V, g, grid, meta = load_model(args.model)
    if args.grid:
        expected = HyperGrid.load(args.grid, k=grid.k)
        if expected.combos != grid.combos:
            raise ValueError("--grid does not match the grid the model was trained with")
    splits = args.split or ["validation", "test"]
    results, counts = {}, {}
    for name in ("validation", "test"):
        if name in splits:
            counts[name] = {}
            results[name] = holdout_rmse(os.path.join(args.prep, f"{name}.fbed"),
                                         U, V, g, grid, counts[name])
    counts["lazy_initialised"] = {"U": U.missing, "V": V.missing}
    report = rmse_report(grid, results.get("validation"), results.get("test"),
                         extra={"counts": counts})
    with open(args.out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(json.dumps({k: report[k] for k in ("best_model_index", "best_test_rmse")
                      if k in report}))


def cmd_export_plot(args):
    _, V, _, grid, _ = load_model(args.model)
    ids = args.ids if args.ids is not None else np.sort(V.ids)
    export_plot_data(V, ids, args.model_index, grid, args.out)


COMMANDS = {"prep": cmd_prep, "serve": cmd_serve, "train": cmd_train, "local": cmd_local,
            "eval": cmd_eval, "export-plot": cmd_export_plot}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FACTORBIRD_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"factorbird: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"factorbird {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
