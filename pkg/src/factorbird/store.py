"""Packed factor-matrix partitions, graph statistics and their file formats."""
from __future__ import annotations

import os
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

FLOAT = np.float32

STATS_MAGIC = b"FBST"
MATRIX_MAGIC = b"FBMX"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised for malformed stats, edge or matrix files."""


class FactorMatrixPartition(Mapping):
    """A block of factor vectors packed into one preallocated float32 array.

    Rows of ``backing`` are the vectors of the indexed vertices, in the order
    the ids were given. Lookups by id return zero-copy views.
    """

    def __init__(self, vertex_ids, width: int):
        ids = np.asarray(vertex_ids, dtype=np.uint64).ravel()
        if width < 2:
            raise ValueError("width must be at least 2")
        self.width = width
        self.ids = ids
        self.index: dict[int, int] = {}
        for row, vid in enumerate(ids.tolist()):
            if self.index.setdefault(vid, row) != row:
                raise ValueError(f"duplicate vertex id {vid}")
        self.backing = np.zeros((len(ids), width), dtype=FLOAT)
        # sorted view of the index for vectorised lookups
        self._order = np.argsort(ids, kind="stable")
        self._sorted = ids[self._order]

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids.tolist())

    def __contains__(self, vid):
        return int(vid) in self.index

    def __getitem__(self, vid) -> np.ndarray:
        return self.backing[self.index[int(vid)]]

    def offset(self, vid) -> int:
        """Flat offset of a vertex's slice inside the backing storage."""
        return self.index[int(vid)] * self.width

    def rows_of(self, vertex_ids) -> tuple[np.ndarray, np.ndarray]:
        """Row numbers for many ids at once, plus a mask of the ids that exist."""
        vertex_ids = np.asarray(vertex_ids, dtype=np.uint64)
        if len(self._sorted) == 0:
            return np.zeros(len(vertex_ids), dtype=np.int64), np.zeros(len(vertex_ids), bool)
        pos = np.searchsorted(self._sorted, vertex_ids)
        pos = np.minimum(pos, len(self._sorted) - 1)
        found = self._sorted[pos] == vertex_ids
        return self._order[pos].astype(np.int64), found

    def gather(self, vertex_ids, missing=None) -> np.ndarray:
        """Copy the vectors of ``vertex_ids`` into a new ``(n, width)`` array.

        Unknown ids raise ``KeyError`` unless ``missing`` is given; it is
        called as ``missing(vid, out_row)`` to fill the row.
        """
        vertex_ids = np.asarray(vertex_ids, dtype=np.uint64)
        rows, found = self.rows_of(vertex_ids)
        out = np.empty((len(vertex_ids), self.width), dtype=FLOAT)
        out[found] = self.backing[rows[found]]
        if not found.all():
            if missing is None:
                raise KeyError(int(vertex_ids[~found][0]))
            for n in np.flatnonzero(~found):
                missing(int(vertex_ids[n]), out[n])
        return out


def allocate_partition(vertex_ids, width: int) -> FactorMatrixPartition:
    return FactorMatrixPartition(vertex_ids, width)


def vector_of(partition: FactorMatrixPartition, vertex_id) -> np.ndarray:
    try:
        return partition[vertex_id]
    except KeyError:
        raise KeyError(f"vertex {vertex_id} is not in this partition") from None


def _degree_table(ids, degrees) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(ids, dtype=np.uint64)
    degrees = np.asarray(degrees, dtype=np.uint32)
    order = np.argsort(ids, kind="stable")
    return ids[order], degrees[order]


@dataclass(eq=False)
class GraphStats:
    """Vertex counts, edge count, mean strength and degree tables.

    Degree tables are kept as id-sorted arrays; ``out_degree``/``in_degree``
    give dict views and ``out_degrees_of``/``in_degrees_of`` vectorised
    lookups (unknown vertices get degree 1).
    """

    num_rows: int = 0
    num_cols: int = 0
    num_edges: int = 0
    avg_strength: float = 0.0
    out_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint64))
    out_deg: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint32))
    in_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint64))
    in_deg: np.ndarray = field(default_factory=lambda: np.zeros(0, np.uint32))

    def __post_init__(self):
        self.out_ids, self.out_deg = _degree_table(self.out_ids, self.out_deg)
        self.in_ids, self.in_deg = _degree_table(self.in_ids, self.in_deg)
        self.avg_strength = float(np.float32(self.avg_strength))

    @classmethod
    def from_edges(cls, edges) -> GraphStats:
        if len(edges) == 0:
            return cls()
        out_ids, out_deg = np.unique(edges["i"], return_counts=True)
        in_ids, in_deg = np.unique(edges["j"], return_counts=True)
        return cls(len(out_ids), len(in_ids), len(edges),
                   float(np.mean(edges["a"], dtype=np.float64)),
                   out_ids, out_deg, in_ids, in_deg)

    @property
    def out_degree(self) -> dict[int, int]:
        return dict(zip(self.out_ids.tolist(), self.out_deg.tolist()))

    @property
    def in_degree(self) -> dict[int, int]:
        return dict(zip(self.in_ids.tolist(), self.in_deg.tolist()))

    @staticmethod
    def _lookup(ids, deg, query) -> np.ndarray:
        query = np.asarray(query, dtype=np.uint64)
        out = np.ones(len(query), dtype=np.float64)
        if len(ids):
            pos = np.minimum(np.searchsorted(ids, query), len(ids) - 1)
            hit = ids[pos] == query
            out[hit] = deg[pos[hit]]
        return out

    def out_degrees_of(self, rows) -> np.ndarray:
        return self._lookup(self.out_ids, self.out_deg, rows)

    def in_degrees_of(self, cols) -> np.ndarray:
        return self._lookup(self.in_ids, self.in_deg, cols)

    def __eq__(self, other):
        if not isinstance(other, GraphStats):
            return NotImplemented
        return (self.num_rows == other.num_rows and self.num_cols == other.num_cols
                and self.num_edges == other.num_edges
                and np.float32(self.avg_strength) == np.float32(other.avg_strength)
                and np.array_equal(self.out_ids, other.out_ids)
                and np.array_equal(self.out_deg, other.out_deg)
                and np.array_equal(self.in_ids, other.in_ids)
                and np.array_equal(self.in_deg, other.in_deg))


_STATS_HEADER = struct.Struct("<4sIQQQf")
_DEGREE_DTYPE = np.dtype([("id", "<u8"), ("degree", "<u4")])


def save_stats(stats: GraphStats, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_STATS_HEADER.pack(STATS_MAGIC, FORMAT_VERSION, stats.num_rows,
                                    stats.num_cols, stats.num_edges, stats.avg_strength))
        for ids, deg in ((stats.out_ids, stats.out_deg), (stats.in_ids, stats.in_deg)):
            table = np.empty(len(ids), dtype=_DEGREE_DTYPE)
            table["id"], table["degree"] = ids, deg
            fh.write(struct.pack("<Q", len(ids)))
            fh.write(table.tobytes())


def load_stats(path) -> GraphStats:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _STATS_HEADER.size:
        raise FormatError(f"{path}: truncated stats header")
    magic, version, m, n, num_edges, avg = _STATS_HEADER.unpack_from(data)
    if magic != STATS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = _STATS_HEADER.size
    tables = []
    for name in ("out-degree", "in-degree"):
        if pos + 8 > len(data):
            raise FormatError(f"{path}: truncated {name} count at byte {pos}")
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        nbytes = count * _DEGREE_DTYPE.itemsize
        if pos + nbytes > len(data):
            raise FormatError(f"{path}: truncated {name} table at byte {pos}")
        tables.append(np.frombuffer(data, dtype=_DEGREE_DTYPE, count=count, offset=pos))
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    out, inn = tables
    return GraphStats(m, n, num_edges, avg, out["id"].copy(), out["degree"].copy(),
                      inn["id"].copy(), inn["degree"].copy())


_MATRIX_HEADER = struct.Struct("<4sIQI")


def save_matrix(path, ids, rows: np.ndarray) -> None:
    """Write ``(id, vector)`` records in the FBMX matrix format.

    Layout: magic ``FBMX``, u32 version, u64 count, u32 width, then
    ``count`` records of u64 id followed by ``width`` float32 values.
    """
    ids = np.asarray(ids, dtype="<u8")
    rows = np.asarray(rows, dtype="<f4")
    width = rows.shape[1] if rows.ndim == 2 else 0
    rec = np.dtype([("id", "<u8"), ("vec", "<f4", (width,))])
    table = np.empty(len(ids), dtype=rec)
    table["id"] = ids
    if len(ids):
        table["vec"] = rows
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(_MATRIX_HEADER.pack(MATRIX_MAGIC, FORMAT_VERSION, len(ids), width))
            fh.write(table.tobytes())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_matrix(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _MATRIX_HEADER.size:
        raise FormatError(f"{path}: truncated matrix header")
    magic, version, count, width = _MATRIX_HEADER.unpack_from(data)
    if magic != MATRIX_MAGIC or version != FORMAT_VERSION:
        raise FormatError(f"{path}: not an FBMX v1 file")
    rec = np.dtype([("id", "<u8"), ("vec", "<f4", (width,))])
    if len(data) != _MATRIX_HEADER.size + count * rec.itemsize:
        raise FormatError(f"{path}: size does not match {count} records of width {width}")
    table = np.frombuffer(data, dtype=rec, count=count, offset=_MATRIX_HEADER.size)
    return table["id"].copy(), table["vec"].reshape(count, width).copy()
