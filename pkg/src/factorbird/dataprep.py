"""Offline preparation: split, statistics and column partitioning."""
from __future__ import annotations

import json
import logging
import os

import numpy as np

from .edges import read_any, read_edges, write_edges
from .hashing import RESERVED_KEY_BASE, shard_array, splitmix64, splitmix64_array
from .store import GraphStats, save_stats

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


def split_assignment(edges: np.ndarray, ratios, seed: int) -> np.ndarray:
    """Split index (0, 1, 2) of every edge from a seeded hash of ``(i, j)``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != 3 or (ratios < 0).any() or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    salt = np.uint64(splitmix64(seed))
    h = splitmix64_array(splitmix64_array(edges["i"] ^ salt) ^ edges["j"])
    u = (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    bounds = np.cumsum(ratios)[:2]
    return np.searchsorted(bounds, u, side="right").astype(np.int64)


def dedupe(edges: np.ndarray) -> tuple[np.ndarray, int]:
    """Drop repeated ``(i, j)`` pairs, keeping the first occurrence in file order."""
    if len(edges) == 0:
        return edges, 0
    pairs = np.stack([edges["i"], edges["j"]], axis=1)
    _, first = np.unique(pairs, axis=0, return_index=True)
    first.sort()
    return edges[first], len(edges) - len(first)


def split(edges_path, ratios, seed: int, out_paths, binarize: bool = False) -> dict:
    """Split an edge file into train/validation/test FBED files; returns the counts."""
    edges = read_any(edges_path)
    if len(edges) and edges["i"].max() >= RESERVED_KEY_BASE:
        raise ValueError("vertex ids collide with the reserved key range")
    edges, dupes = dedupe(edges)
    if dupes:
        log.warning("dropped %d duplicate edges", dupes)
    if binarize:
        edges["a"] = 1.0
    assign = split_assignment(edges, ratios, seed)
    counts = {}
    for s, (name, path) in enumerate(zip(SPLITS, out_paths)):
        part = edges[assign == s]
        write_edges(path, part)
        counts[name] = len(part)
    return counts


def compute_stats(train_path, stats_path=None) -> GraphStats:
    edges, dupes = dedupe(read_edges(train_path))
    if dupes:
        log.warning("%s: %d duplicate (i, j) pairs ignored for statistics", train_path, dupes)
    stats = GraphStats.from_edges(edges)
    if stats_path is not None:
        save_stats(stats, stats_path)
    return stats


def partition_by_column(train_path, num_partitions: int, seed: int, out_dir) -> list[dict]:
    """Route every edge to ``hash(j) mod num_partitions`` and shuffle each part.

    Writes ``part-XXXXX.fbed`` and the sorted column ids ``part-XXXXX.cols``
    (raw little-endian u64) per partition plus ``manifest.json``.
    """
    if num_partitions < 1:
        raise ValueError("num_partitions must be at least 1")
    os.makedirs(out_dir, exist_ok=True)
    edges = read_edges(train_path)
    which = shard_array(edges["j"], num_partitions) if len(edges) else np.zeros(0, int)
    manifest = []
    for p in range(num_partitions):
        part = edges[which == p]
        rng = np.random.default_rng([seed, 3, p])
        part = part[rng.permutation(len(part))]
        name = f"part-{p:05d}"
        write_edges(os.path.join(out_dir, name + ".fbed"), part)
        cols = np.unique(part["j"]).astype("<u8")
        cols.tofile(os.path.join(out_dir, name + ".cols"))
        manifest.append({"partition": p, "path": name + ".fbed", "edges": int(len(part)),
                         "columns": int(len(cols)), "columns_path": name + ".cols"})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump({"num_partitions": num_partitions, "seed": seed,
                   "partitions": manifest}, fh, indent=2)
    return manifest


def load_manifest(prep_dir) -> dict:
    with open(os.path.join(prep_dir, "manifest.json")) as fh:
        return json.load(fh)


def load_columns(prep_dir, entry: dict) -> np.ndarray:
    return np.fromfile(os.path.join(prep_dir, entry["columns_path"]), dtype="<u8")


def prepare(input_path, out_dir, ratios=(0.8, 0.1, 0.1), seed: int = 0,
            num_partitions: int = 1, binarize: bool = False) -> dict:
    """Full preparation into ``out_dir``: splits, training stats and partitions."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, f"{name}.fbed") for name in SPLITS]
    counts = split(input_path, ratios, seed, paths, binarize=binarize)
    stats = compute_stats(paths[0], os.path.join(out_dir, "stats.fbst"))
    manifest = partition_by_column(paths[0], num_partitions, seed, out_dir)
    summary = {"counts": counts, "ratios": list(ratios), "seed": seed,
               "binarize": binarize, "num_rows": stats.num_rows,
               "num_cols": stats.num_cols, "avg_strength": stats.avg_strength,
               "partitions": manifest}
    with open(os.path.join(out_dir, "prep.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    return summary

