"""Hold-out RMSE per packed model, model selection and 2-D factor export."""
from __future__ import annotations

import glob
import json
import math
import os
from collections.abc import Mapping

import numpy as np

from .edges import stream_edges
from .model import HyperGrid, Hyperparameters, predict_rows
from .server import U_DOMAIN, V_DOMAIN, lazy_init_vector
from .store import load_matrix


class LoadedMatrix:
    """Exported factor rows with optional lazy initialisation of unknown ids."""

    def __init__(self, ids, rows, init=None):
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.rows = np.asarray(rows, dtype=np.float32)
        self.width = self.rows.shape[1] if self.rows.ndim == 2 else 0
        order = np.argsort(self.ids, kind="stable")
        self._sorted, self._order = self.ids[order], order
        self.init = init
        self.missing = 0

    def __len__(self):
        return len(self.ids)

    def gather(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.uint64)
        out = np.empty((len(ids), self.width), dtype=np.float32)
        if len(self._sorted):
            pos = np.minimum(np.searchsorted(self._sorted, ids), len(self._sorted) - 1)
            found = self._sorted[pos] == ids
            out[found] = self.rows[self._order[pos[found]]]
        else:
            found = np.zeros(len(ids), dtype=bool)
        if not found.all():
            if self.init is None:
                raise KeyError(int(ids[~found][0]))
            for n in np.flatnonzero(~found):
                out[n] = self.init(int(ids[n]))
            self.missing += int(np.count_nonzero(~found))
        return out

    def __getitem__(self, vid):
        return self.gather([vid])[0]


class RemoteMatrix:
    """Reads U rows through a parameter-server client."""

    def __init__(self, client, kind: str = "eval"):
        self.client = client
        self.kind = kind

    def gather(self, ids) -> np.ndarray:
        return self.client.fetch_batch(ids, self.kind)


def _gather(M, ids) -> np.ndarray:
    if hasattr(M, "gather"):
        return M.gather(ids)
    if isinstance(M, Mapping):
        if len(ids) == 0:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack([np.asarray(M[int(x)]) for x in ids])
    raise TypeError(f"cannot read factor vectors from {type(M).__name__}")


def _edge_chunks(edges, chunk_size=65536):
    if isinstance(edges, (str, os.PathLike)):
        yield from stream_edges(edges, chunk_size)
    else:
        for start in range(0, len(edges), chunk_size):
            yield edges[start:start + chunk_size]


def holdout_rmse(edges, U, V, g, grid: HyperGrid, counts: dict | None = None) -> np.ndarray:
    """Unweighted RMSE of every packed model on a held-out edge set.

    ``edges`` is an FBED path or a structured array. ``counts``, if given, is
    filled with the positive/negative edge counts (negatives have ``a == 0``
    and come only from files that contain them).
    """
    layout = grid.layout
    g = np.asarray(g, dtype=np.float64)
    sq = np.zeros(grid.c)
    n = npos = 0
    for chunk in _edge_chunks(edges):
        if len(chunk) == 0:
            continue
        pred = predict_rows(_gather(U, chunk["i"]), _gather(V, chunk["j"]), g, layout)
        a = chunk["a"].astype(np.float64)
        for p in range(grid.c):
            diff = np.ascontiguousarray(pred[:, p]) - a
            sq[p] += float(np.dot(diff, diff))
        n += len(chunk)
        npos += int(np.count_nonzero(chunk["a"] != 0))
    if n == 0:
        raise ValueError("held-out edge set is empty")
    if counts is not None:
        counts.update(edges=n, positives=npos, negatives=n - npos)
    return np.sqrt(sq / n)


def select_best(rmse, grid: HyperGrid | None = None) -> tuple[int, Hyperparameters | None]:
    """Index of the lowest RMSE (first on ties, NaN entries ignored)."""
    rmse = np.asarray(rmse, dtype=np.float64)
    if rmse.size == 0:
        raise ValueError("no RMSE values to select from")
    if np.isnan(rmse).all():
        raise ValueError("every RMSE value is NaN")
    best = int(np.nanargmin(rmse))
    return best, (grid[best] if grid is not None else None)


def export_plot_data(V, ids, model_index: int, grid: HyperGrid, out_path) -> None:
    """Write ``id<TAB>f1<TAB>f2`` lines for a rank-2 model, in request order."""
    layout = grid.layout
    if layout.ranks[model_index] != 2:
        raise ValueError(f"model {model_index} has rank {layout.ranks[model_index]}, "
                         f"plot export needs rank 2")
    off = layout.offset(model_index)
    ids = np.asarray(ids, dtype=np.uint64)
    rows = _gather(V, ids)
    with open(out_path, "w") as fh:
        for vid, row in zip(ids.tolist(), rows):
            fh.write(f"{vid}\t{float(row[off + 1])!r}\t{float(row[off + 2])!r}\n")


def load_model(model_dir):
    """Load an exported model directory: ``(U, V, g, grid, meta)``.

    ``model_dir`` holds ``model.json`` and one sub-directory per worker with
    ``U.fbmx``/``V.fbmx``/``g.json``. Ids absent from the export fall back to
    the same lazy initialisation used during training.
    """
    with open(os.path.join(model_dir, "model.json")) as fh:
        meta = json.load(fh)
    grid = HyperGrid.from_json(meta["grid"])
    layout = grid.layout
    seed, stddev = meta["init_seed"], meta["init_stddev"]

    def init_for(domain):
        return lambda key: lazy_init_vector(key, layout.width, seed, stddev, layout,
                                            grid.stream_offset, domain=domain)

    parts = sorted(glob.glob(os.path.join(model_dir, "part-*")))
    mats = {}
    for name in ("U", "V"):
        loaded = [load_matrix(os.path.join(p, f"{name}.fbmx")) for p in parts]
        ids = np.concatenate([x[0] for x in loaded]) if loaded else np.zeros(0, np.uint64)
        rows = (np.concatenate([x[1] for x in loaded]) if loaded
                else np.zeros((0, layout.width), np.float32))
        mats[name] = LoadedMatrix(ids, rows.reshape(-1, layout.width),
                                  init_for(U_DOMAIN if name == "U" else V_DOMAIN))
    with open(os.path.join(parts[0], "g.json")) as fh:
        g = np.asarray(json.load(fh)["g"], dtype=np.float32)
    return mats["U"], mats["V"], g, grid, meta


def rmse_report(grid: HyperGrid, validation=None, test=None, extra: dict | None = None) -> dict:
    """Per-model RMSE report; the best model is chosen on validation RMSE."""

    def val(arr, p):
        if arr is None:
            return None
        x = float(arr[p])
        return None if math.isnan(x) else x

    models = []
    for p, h in enumerate(grid.combos):
        models.append({"model_index": p, "eta0": h.eta0, "lambda": h.lam, "decay": h.decay,
                       "k": h.k, "rank": h.active_rank, "learn_biases": h.learn_biases,
                       "validation_rmse": val(validation, p), "test_rmse": val(test, p)})
    report = {"models": models}
    if validation is not None:
        best, _ = select_best(validation, grid)
        report["best_model_index"] = best
        report["best_test_rmse"] = val(test, best)
    if extra:
        report.update(extra)
    return report
