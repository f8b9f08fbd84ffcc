"""Runs trainers against an in-process store or networked parameter servers."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

from . import dataprep
from .client import LocalParamClient, ParamClient
from .model import HyperGrid
from .server import ParamStore, ServerConfig
from .store import load_stats
from .trainer import (PassReport, Trainer, TrainerConfig, export_matrices,
                      init_local_partition, owned_rows)

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    prep_dir: str
    out_dir: str
    grid: HyperGrid
    passes: int = 1
    threads: int = 1
    negative_rate: float = 0.0
    negative_weight: float = 1.0
    fetch_batch_size: int = 512
    seed: int = 0
    init_stddev: float = 0.01
    loss_sample_size: int = 1000
    servers: list[str] = field(default_factory=list)
    retries: int = 3
    timeout: float = 5.0

    def __post_init__(self):
        if self.passes < 1:
            raise ValueError("passes must be at least 1")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    def server_config(self, bind: str = "127.0.0.1:0") -> ServerConfig:
        layout = self.grid.layout
        return ServerConfig(width=layout.width, bind=bind, init_seed=self.seed,
                            init_stddev=self.init_stddev, stride=layout.stride,
                            stream_offset=self.grid.stream_offset)

    def to_json(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> RunConfig:
        d = dict(d)
        d["grid"] = HyperGrid.from_json(d["grid"])
        return cls(**d)


def _trainer_config(cfg: RunConfig, entry: dict) -> TrainerConfig:
    return TrainerConfig(
        partition_path=os.path.join(cfg.prep_dir, entry["path"]),
        stats_path=os.path.join(cfg.prep_dir, "stats.fbst"),
        grid=cfg.grid, passes=cfg.passes, threads=cfg.threads,
        negative_rate=cfg.negative_rate, negative_weight=cfg.negative_weight,
        fetch_batch_size=cfg.fetch_batch_size, seed=cfg.seed,
        init_stddev=cfg.init_stddev, partition_index=entry["partition"],
        loss_sample_size=cfg.loss_sample_size)


def write_meta(cfg: RunConfig, num_partitions: int) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    meta = {"grid": cfg.grid.to_json(), "width": cfg.grid.layout.width,
            "init_seed": cfg.seed, "init_stddev": cfg.init_stddev,
            "num_partitions": num_partitions}
    with open(os.path.join(cfg.out_dir, "model.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    with open(os.path.join(cfg.out_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)


class _Worker:
    """One learner: V partition, trainer and export for a manifest entry."""

    def __init__(self, cfg: RunConfig, entry: dict, client_factory, stats):
        self.cfg = cfg
        self.entry = entry
        self.client_factory = client_factory
        self.stats = stats
        cols = dataprep.load_columns(cfg.prep_dir, entry)
        self.V = init_local_partition(cols, cfg.grid, cfg.seed, cfg.init_stddev)
        self.trainer = Trainer(_trainer_config(cfg, entry), self.V, client_factory, stats)
        self.reports: list[PassReport] = []
        self.dir = os.path.join(cfg.out_dir, f"part-{entry['partition']:05d}")

    def steps(self):
        os.makedirs(self.dir, exist_ok=True)
        with open(os.path.join(self.dir, "reports.jsonl"), "w") as fh:
            self.reports = yield from self.trainer.steps(fh)

    def export(self, num_partitions: int):
        rows = owned_rows(self.stats.out_ids, self.entry["partition"], num_partitions)
        with self.client_factory() as client:
            return export_matrices(self.V, client, rows, self.dir, self.cfg.grid.c)


def _run_workers(workers):
    """Advance all workers round-robin, one block each per turn.

    This interleaves the learners' reads and writes of shared U rows the way
    concurrent machines would, but in a fixed order, so runs are reproducible.
    """
    active = [w.steps() for w in workers]
    while active:
        still = []
        for gen in active:
            try:
                next(gen)
            except StopIteration:
                continue
            still.append(gen)
        active = still


def run_local(cfg: RunConfig, partitions=None) -> dict[int, list[PassReport]]:
    """Train every (or the selected) partition against one in-process store."""
    manifest = dataprep.load_manifest(cfg.prep_dir)
    entries = [e for e in manifest["partitions"]
               if partitions is None or e["partition"] in partitions]
    stats = load_stats(os.path.join(cfg.prep_dir, "stats.fbst"))
    store = ParamStore(cfg.server_config())
    factory = lambda: LocalParamClient(store, cfg.fetch_batch_size)
    write_meta(cfg, manifest["num_partitions"])
    workers = [_Worker(cfg, e, factory, stats) for e in entries]
    _run_workers(workers)
    for w in workers:
        w.export(manifest["num_partitions"])
    return {w.entry["partition"]: w.reports for w in workers}


def run_worker(cfg: RunConfig, partition: int) -> list[PassReport]:
    """Train one partition against the networked parameter servers in ``cfg.servers``."""
    if not cfg.servers:
        raise ValueError("no parameter servers configured")
    manifest = dataprep.load_manifest(cfg.prep_dir)
    entry = next((e for e in manifest["partitions"] if e["partition"] == partition), None)
    if entry is None:
        raise ValueError(f"partition {partition} is not in the manifest")
    stats = load_stats(os.path.join(cfg.prep_dir, "stats.fbst"))
    width = cfg.grid.layout.width
    factory = lambda: ParamClient(cfg.servers, width, cfg.fetch_batch_size,
                                  retries=cfg.retries, timeout=cfg.timeout)
    write_meta(cfg, manifest["num_partitions"])
    worker = _Worker(cfg, entry, factory, stats)
    _run_workers([worker])
    worker.export(manifest["num_partitions"])
    return worker.reports
