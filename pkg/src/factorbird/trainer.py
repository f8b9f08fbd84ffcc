"""Learner machine: streams a column partition and runs Hogwild-style SGD.

The local V partition lives in one float32 array shared by all worker
threads, which update it without locks. Rows of U are fetched per block from
the parameter server, updated in place and written back; the per-model
global biases travel the same way under reserved keys.
"""
from __future__ import annotations

import json
import logging
import os
import queue
import threading
import time
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .client import TrafficLog, TransportError
from .edges import EVENT_DTYPE, count_edges, stream_edges
from .hashing import global_bias_key, shard_array
from .model import HyperGrid, LossTotals, estimate_components
from .server import V_DOMAIN, lazy_init_vector
from .store import FactorMatrixPartition, GraphStats, load_stats, save_matrix

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training stopped early; ``reports`` holds the passes completed so far."""

    def __init__(self, msg, reports=()):
        super().__init__(msg)
        self.reports = list(reports)


@dataclass
class TrainerConfig:
    partition_path: str
    stats_path: str | None
    grid: HyperGrid
    passes: int = 1
    threads: int = 1
    negative_rate: float = 0.0
    negative_weight: float = 1.0
    fetch_batch_size: int = 512
    seed: int = 0
    init_stddev: float = 0.01
    partition_index: int = 0
    loss_sample_size: int = 1000

    def __post_init__(self):
        if self.passes < 1:
            raise ValueError("passes must be at least 1")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.negative_rate < 0:
            raise ValueError("negative rate must be non-negative")
        if not self.negative_weight > 0:
            raise ValueError("negative weight must be positive")
        if self.fetch_batch_size < 1:
            raise ValueError("fetch batch size must be positive")


@dataclass
class PassReport:
    pass_index: int
    positives: int = 0
    negatives: int = 0
    mse: list = field(default_factory=list)
    loss_error_est: list = field(default_factory=list)
    loss_reg_est: list = field(default_factory=list)
    seconds: float = 0.0
    blocks: int = 0
    distinct_rows: int = 0
    skipped: int = 0
    aborted: bool = False
    traffic: TrafficLog = field(default_factory=TrafficLog)

    @property
    def u_keys_fetched(self) -> int:
        return self.traffic.count("u", "fetched")

    @property
    def v_keys_fetched(self) -> int:
        return self.traffic.count("v", "fetched")

    def to_json(self) -> dict:
        return {"pass": self.pass_index, "positives": self.positives,
                "negatives": self.negatives, "mse": self.mse,
                "loss_error_est": self.loss_error_est, "loss_reg_est": self.loss_reg_est,
                "seconds": self.seconds, "u_keys_fetched": self.u_keys_fetched,
                "v_keys_fetched": self.v_keys_fetched, "blocks": self.blocks,
                "distinct_rows": self.distinct_rows, "skipped": self.skipped,
                "aborted": self.aborted, "traffic": self.traffic.to_dict()}


def mix_negatives(edges: np.ndarray, rho: float, negative_weight: float,
                  local_column_ids, row_ids, rng: np.random.Generator) -> np.ndarray:
    """Interleave synthetic negatives after each positive edge.

    Each positive is followed by ``floor(rho)`` negatives plus one more with
    probability ``rho - floor(rho)``. A negative has strength 0, weight
    ``negative_weight``, a column drawn uniformly from the local partition and
    a row drawn uniformly from ``row_ids``.
    """
    n = len(edges)
    if rho < 0:
        raise ValueError("negative rate must be non-negative")
    if rho == 0 or n == 0:
        out = np.zeros(n, dtype=EVENT_DTYPE)
        for name in ("i", "j", "a", "w"):
            out[name] = edges[name]
        return out
    local_column_ids = np.asarray(local_column_ids, dtype=np.uint64)
    row_ids = np.asarray(row_ids, dtype=np.uint64)
    if len(local_column_ids) == 0 or len(row_ids) == 0:
        raise ValueError("negative sampling needs non-empty local columns and rows")
    whole = int(np.floor(rho))
    frac = rho - whole
    counts = np.full(n, whole, dtype=np.int64)
    if frac > 0:
        counts += rng.random(n) < frac
    group_start = np.arange(n) + np.concatenate(([0], np.cumsum(counts)[:-1]))
    total = n + int(counts.sum())
    out = np.zeros(total, dtype=EVENT_DTYPE)
    is_pos = np.zeros(total, dtype=bool)
    is_pos[group_start] = True
    for name in ("i", "j", "a", "w"):
        out[name][group_start] = edges[name]
    num_neg = total - n
    neg = ~is_pos
    out["j"][neg] = local_column_ids[rng.integers(0, len(local_column_ids), num_neg)]
    out["i"][neg] = row_ids[rng.integers(0, len(row_ids), num_neg)]
    out["w"][neg] = negative_weight
    out["neg"][neg] = True
    return out


def iter_blocks(path, block_size: int, rho: float, negative_weight: float,
                local_column_ids, row_ids, rng: np.random.Generator,
                chunk_size: int = 65536) -> Iterator[np.ndarray]:
    """Stream the partition file as mixed event blocks of ``block_size``."""
    carry = np.zeros(0, dtype=EVENT_DTYPE)
    for chunk in stream_edges(path, chunk_size):
        mixed = mix_negatives(chunk, rho, negative_weight, local_column_ids, row_ids, rng)
        if len(carry):
            mixed = np.concatenate((carry, mixed))
        full = len(mixed) - len(mixed) % block_size
        for start in range(0, full, block_size):
            yield mixed[start:start + block_size]
        carry = mixed[full:]
    if len(carry):
        yield carry


def columns_of(path) -> np.ndarray:
    """Distinct column ids of a partition file, sorted."""
    cols = [np.unique(chunk["j"]) for chunk in stream_edges(path)]
    if not cols:
        return np.zeros(0, dtype=np.uint64)
    return np.unique(np.concatenate(cols))


def init_local_partition(column_ids, grid: HyperGrid, seed: int,
                         stddev: float = 0.01) -> FactorMatrixPartition:
    """Allocate the local V partition and initialise every column vector."""
    layout = grid.layout
    part = FactorMatrixPartition(column_ids, layout.width)
    for row, vid in enumerate(part.ids.tolist()):
        part.backing[row] = lazy_init_vector(vid, layout.width, seed, stddev, layout,
                                             grid.stream_offset, domain=V_DOMAIN)
    return part


class _PassState:
    """Per-worker accumulators, merged after the pass."""

    def __init__(self, c: int):
        self.positives = 0
        self.negatives = 0
        self.blocks = 0
        self.distinct_rows = 0
        self.sq_err = np.zeros(c)
        self.skipped = np.zeros(c, dtype=np.int64)

    def merge(self, other: _PassState):
        self.positives += other.positives
        self.negatives += other.negatives
        self.blocks += other.blocks
        self.distinct_rows += other.distinct_rows
        self.sq_err += other.sq_err
        self.skipped += other.skipped


class Trainer:
    """Runs the configured passes over one column partition."""

    def __init__(self, config: TrainerConfig, local_V: FactorMatrixPartition,
                 client_factory: Callable, stats: GraphStats | None = None):
        self.config = config
        self.V = local_V
        self.client_factory = client_factory
        self.stats = stats if stats is not None else load_stats(config.stats_path)
        self.grid = config.grid
        self.layout = config.grid.layout
        if local_V.width != self.layout.width:
            raise ValueError(f"V partition width {local_V.width} does not match "
                             f"grid width {self.layout.width}")
        self.g_keys = np.array([global_bias_key(p) for p in range(self.grid.c)],
                               dtype=np.uint64)
        self._ranks = np.array(self.layout.ranks, dtype=np.int64)
        self._biases = np.array(self.layout.biases, dtype=np.bool_)
        self._lambdas = self.grid.lambdas()
        self.num_positive = count_edges(config.partition_path)

    # -- parameter exchange -------------------------------------------------

    def _fetch_g(self, client, kind="g") -> np.ndarray:
        return client.fetch_batch(self.g_keys, kind)[:, 0].copy()

    def _write_g(self, client, g: np.ndarray):
        vecs = np.zeros((len(g), self.layout.width), dtype=np.float32)
        vecs[:, 0] = g
        client.write_batch(self.g_keys, vecs, "g")

    def _process_block(self, block, client, eta, state: _PassState):
        rows, inv = np.unique(block["i"], return_inverse=True)
        v_idx, found = self.V.rows_of(block["j"])
        if not found.all():
            missing = int(block["j"][~found][0])
            raise TrainingError(f"column {missing} is not in the local V partition")
        U_rows = client.fetch_batch(rows, "u")
        g = self._fetch_g(client).astype(np.float32)
        n_i = self.stats.out_degrees_of(rows)[inv]
        n_j = self.stats.in_degrees_of(block["j"])
        _kernels.sgd_block(U_rows, inv.astype(np.int64), self.V.backing, v_idx,
                           block["a"].astype(np.float64), block["w"].astype(np.float64),
                           n_i, n_j, g, eta, self._lambdas, self._ranks, self._biases,
                           self.layout.stride, state.sq_err, state.skipped)
        client.write_batch(rows, U_rows, "u")
        self._write_g(client, g)
        negs = int(np.count_nonzero(block["neg"]))
        state.negatives += negs
        state.positives += len(block) - negs
        state.blocks += 1
        state.distinct_rows += len(rows)

    # -- passes -------------------------------------------------------------

    def _row_ids(self) -> np.ndarray:
        return self.stats.out_ids

    def _blocks(self, pass_index: int):
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 1, pass_index, cfg.partition_index])
        return iter_blocks(cfg.partition_path, cfg.fetch_batch_size, cfg.negative_rate,
                           cfg.negative_weight, self.V.ids, self._row_ids(), rng)

    def _sample_mask(self, rng, n, q):
        return rng.random(n) < q

    def run_pass(self, pass_index: int, clients) -> PassReport:
        return drain(self.pass_steps(pass_index, clients))

    def pass_steps(self, pass_index: int, clients):
        """Generator form of one pass: yields after every single-threaded block
        and returns the ``PassReport``. Lets callers interleave several trainers
        deterministically."""
        cfg = self.config
        c = self.grid.c
        eta = self.grid.learning_rates(pass_index)
        expected = max(1.0, self.num_positive * (1.0 + cfg.negative_rate))
        q = min(1.0, cfg.loss_sample_size / expected)
        sample_rng = np.random.default_rng([cfg.seed, 2, pass_index, cfg.partition_index])
        samples = []
        start = time.perf_counter()
        states = [_PassState(c) for _ in clients]

        if cfg.threads == 1:
            for block in self._blocks(pass_index):
                samples.append(block[self._sample_mask(sample_rng, len(block), q)])
                self._process_block(block, clients[0], eta, states[0])
                yield
        else:
            self._run_threaded(pass_index, clients, eta, states, samples, sample_rng, q)

        total = _PassState(c)
        for s in states:
            total.merge(s)
        report = PassReport(pass_index, total.positives, total.negatives,
                            blocks=total.blocks, distinct_rows=total.distinct_rows,
                            skipped=int(total.skipped.sum()))
        events = total.positives + total.negatives
        counted = np.maximum(events - total.skipped, 1)
        report.mse = (total.sq_err / counted).tolist() if events else [float("nan")] * c
        for cl in clients:
            report.traffic.merge(cl.take_log())
        sample = np.concatenate(samples) if samples else np.zeros(0, EVENT_DTYPE)
        report.loss_error_est, report.loss_reg_est = self._estimate(
            clients[0], sample, events, sample_rng)
        report.seconds = time.perf_counter() - start
        self._check_finite(pass_index)
        return report

    def _run_threaded(self, pass_index, clients, eta, states, samples, sample_rng, q):
        work: queue.Queue = queue.Queue(maxsize=2 * len(clients))
        errors: list[BaseException] = []
        stop = threading.Event()

        def worker(client, state):
            while True:
                block = work.get()
                if block is None:
                    return
                if stop.is_set():
                    continue
                try:
                    self._process_block(block, client, eta, state)
                except BaseException as exc:
                    errors.append(exc)
                    stop.set()

        threads = [threading.Thread(target=worker, args=(cl, st), daemon=True)
                   for cl, st in zip(clients, states)]
        for t in threads:
            t.start()
        try:
            for block in self._blocks(pass_index):
                if stop.is_set():
                    break
                samples.append(block[self._sample_mask(sample_rng, len(block), q)])
                work.put(block)
        finally:
            for _ in threads:
                work.put(None)
            for t in threads:
                t.join()
        if errors:
            raise errors[0]

    def _estimate(self, client, sample, events, rng):
        c = self.grid.c
        nan = [float("nan")] * c
        if len(sample) == 0 or len(self.V) == 0 or len(self._row_ids()) == 0:
            return nan, nan
        size = self.config.loss_sample_size
        rows = self._row_ids()
        u_pick = rows[np.sort(rng.choice(len(rows), min(size, len(rows)), replace=False))]
        v_pick = np.sort(rng.choice(len(self.V), min(size, len(self.V)), replace=False))
        g = self._fetch_g(client, "est")
        U_edges = client.fetch_batch(sample["i"], "est")
        v_idx, _ = self.V.rows_of(sample["j"])
        U_sample = client.fetch_batch(u_pick, "est")
        client.take_log()  # estimation traffic is not training traffic
        totals = LossTotals(events, self.stats.num_rows, len(self.V))
        # a diverged model is reported by _check_finite, not by warnings here
        with np.errstate(invalid="ignore", over="ignore"):
            err, reg = estimate_components(sample, U_edges, self.V.backing[v_idx], U_sample,
                                           self.V.backing[v_pick], totals, g, self._lambdas,
                                           self.layout)
        return err.tolist(), reg.tolist()

    def _check_finite(self, pass_index: int):
        bad = [p for p in range(self.grid.c)
               if not np.isfinite(self.V.backing[:, self.layout.slice(p)]).all()]
        if bad:
            raise TrainingError(f"non-finite V parameters after pass {pass_index} "
                                f"in model(s) {bad}; lower the learning rate")

    def train(self, report_stream=None) -> list[PassReport]:
        return drain(self.steps(report_stream))

    def steps(self, report_stream=None):
        """Generator form of ``train``; returns the list of pass reports."""
        cfg = self.config
        clients = [self.client_factory() for _ in range(cfg.threads)]
        reports: list[PassReport] = []
        try:
            for pass_index in range(cfg.passes):
                try:
                    report = yield from self.pass_steps(pass_index, clients)
                except TransportError as exc:
                    partial = PassReport(pass_index, aborted=True)
                    for cl in clients:
                        partial.traffic.merge(cl.take_log())
                    reports.append(partial)
                    raise TrainingError(f"pass {pass_index} aborted: {exc}", reports) from exc
                except TrainingError as exc:
                    exc.reports = reports
                    raise
                reports.append(report)
                log.info("pass %d: %d+%d events, mse %s, %.2fs", pass_index,
                         report.positives, report.negatives,
                         ["%.4f" % m for m in report.mse], report.seconds)
                if report_stream is not None:
                    report_stream.write(json.dumps(report.to_json()) + "\n")
                    report_stream.flush()
        finally:
            for cl in clients:
                cl.close()
        return reports


def drain(gen):
    """Run a generator to completion and return its return value."""
    while True:
        try:
            next(gen)
        except StopIteration as stop:
            return stop.value


def train(config: TrainerConfig, local_V: FactorMatrixPartition, client_factory: Callable,
          stats: GraphStats | None = None, report_stream=None) -> list[PassReport]:
    return Trainer(config, local_V, client_factory, stats).train(report_stream)


def owned_rows(row_ids, partition_index: int, num_partitions: int) -> np.ndarray:
    """Rows of U a worker exports: those hashing to its partition index."""
    row_ids = np.sort(np.asarray(row_ids, dtype=np.uint64))
    if num_partitions == 1:
        return row_ids
    return row_ids[shard_array(row_ids, num_partitions) == partition_index]


def export_matrices(local_V: FactorMatrixPartition, client, row_ids, out_dir,
                    num_models: int, export_g: bool = True) -> dict:
    """Write the V partition, the given U rows and the global biases.

    Files: ``U.fbmx`` (rows sorted by id), ``V.fbmx`` (partition order) and
    ``g.json``. Partially written files are removed if anything fails.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = {"U": os.path.join(out_dir, "U.fbmx"), "V": os.path.join(out_dir, "V.fbmx"),
             "g": os.path.join(out_dir, "g.json")}
    try:
        row_ids = np.sort(np.asarray(row_ids, dtype=np.uint64))
        U_rows = client.fetch_batch(row_ids, "export") if len(row_ids) else \
            np.zeros((0, local_V.width), np.float32)
        save_matrix(paths["U"], row_ids, U_rows)
        save_matrix(paths["V"], local_V.ids, local_V.backing)
        if export_g:
            keys = np.array([global_bias_key(p) for p in range(num_models)], dtype=np.uint64)
            g = client.fetch_batch(keys, "export")[:, 0]
            with open(paths["g"], "w") as fh:
                json.dump({"num_models": num_models, "g": [float(x) for x in g]}, fh)
        else:
            paths.pop("g")
    except Exception as exc:
        for p in paths.values():
            if os.path.exists(p):
                os.remove(p)
        raise OSError(f"export to {out_dir} failed: {exc}") from exc
    return paths
