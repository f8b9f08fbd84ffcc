"""Edge records and the FBED edge-file format.

FBED layout (little-endian): magic ``FBED``, u32 version, u64 count, then
``count`` records of ``(u64 i, u64 j, f32 a, f32 w)``.
"""
from __future__ import annotations

import struct
from collections.abc import Iterator

import numpy as np

from .store import FormatError

EDGE_DTYPE = np.dtype([("i", "<u8"), ("j", "<u8"), ("a", "<f4"), ("w", "<f4")])
# in-memory training events additionally flag synthetic negatives
EVENT_DTYPE = np.dtype(EDGE_DTYPE.descr + [("neg", "?")])

EDGE_MAGIC = b"FBED"
_HEADER = struct.Struct("<4sIQ")
HEADER_SIZE = _HEADER.size


def make_edges(i, j, a, w=None) -> np.ndarray:
    i = np.asarray(i, dtype=np.uint64)
    edges = np.empty(len(i), dtype=EDGE_DTYPE)
    edges["i"], edges["j"], edges["a"] = i, j, a
    edges["w"] = 1.0 if w is None else w
    return edges


def write_edges(path, edges: np.ndarray) -> None:
    edges = np.asarray(edges)
    if edges.dtype != EDGE_DTYPE:
        edges = make_edges(edges["i"], edges["j"], edges["a"], edges["w"])
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EDGE_MAGIC, 1, len(edges)))
        fh.write(edges.tobytes())


def _read_header(fh, path) -> int:
    head = fh.read(HEADER_SIZE)
    if len(head) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header at byte {len(head)}")
    magic, version, count = _HEADER.unpack(head)
    if magic != EDGE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    return count


def stream_edges(path, chunk_size: int = 65536) -> Iterator[np.ndarray]:
    """Yield an FBED file's edges in file order, ``chunk_size`` records at a time."""
    with open(path, "rb") as fh:
        count = _read_header(fh, path)
        remaining = count
        while remaining:
            n = min(chunk_size, remaining)
            offset = fh.tell()
            buf = fh.read(n * EDGE_DTYPE.itemsize)
            if len(buf) != n * EDGE_DTYPE.itemsize:
                bad = offset + (len(buf) // EDGE_DTYPE.itemsize) * EDGE_DTYPE.itemsize
                raise FormatError(f"{path}: truncated record at byte {bad}")
            chunk = np.frombuffer(buf, dtype=EDGE_DTYPE)
            bad_w = np.flatnonzero(~(chunk["w"] > 0))
            if len(bad_w):
                bad = offset + int(bad_w[0]) * EDGE_DTYPE.itemsize
                raise FormatError(f"{path}: non-positive weight in record at byte {bad}")
            yield chunk
            remaining -= n
        if fh.read(1):
            raise FormatError(f"{path}: trailing data at byte {fh.tell() - 1}")


def read_edges(path) -> np.ndarray:
    chunks = list(stream_edges(path))
    if not chunks:
        return np.zeros(0, dtype=EDGE_DTYPE)
    return np.concatenate(chunks)


def count_edges(path) -> int:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def read_tsv(path) -> np.ndarray:
    """Parse ``i<TAB>j<TAB>a[<TAB>w]`` lines; blank lines and ``#`` comments are skipped."""
    i, j, a, w = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise FormatError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields")
            try:
                i.append(int(parts[0]))
                j.append(int(parts[1]))
                a.append(float(parts[2]))
                w.append(float(parts[3]) if len(parts) == 4 else 1.0)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if w[-1] <= 0:
                raise FormatError(f"{path}:{lineno}: weight must be positive")
    return make_edges(i, j, a, w)


def read_any(path) -> np.ndarray:
    """Read FBED or TSV input, sniffing the magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == EDGE_MAGIC:
        return read_edges(path)
    return read_tsv(path)
