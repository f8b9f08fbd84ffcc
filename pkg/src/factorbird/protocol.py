"""Binary framing for the parameter-server protocol.

Every frame is ``u32 payload_len, u8 opcode, payload`` (little-endian).
Vectors travel as ``width`` float32 values following their u64 key.
"""
from __future__ import annotations

import socket
import struct

import numpy as np

OP_GET_BATCH = 0x01
OP_PUT_BATCH = 0x02
OP_STATS = 0x03
REPLY_GET_BATCH = 0x81
REPLY_PUT_BATCH = 0x82
REPLY_STATS = 0x83
OP_ERROR = 0x7F

MAX_BATCH = 4096
# frames larger than this are not even drained; the connection is dropped
HARD_FRAME_LIMIT = 1 << 28

ERR_MALFORMED = 1
ERR_BATCH_TOO_LARGE = 2
ERR_WIDTH = 3
ERR_UNKNOWN_OPCODE = 4
ERR_INTERNAL = 5

_FRAME = struct.Struct("<IB")
_COUNT = struct.Struct("<I")
_ERROR = struct.Struct("<HH")


class ProtocolError(Exception):
    def __init__(self, code: int, detail: str = ""):
        super().__init__(f"protocol error {code}: {detail}")
        self.code = code
        self.detail = detail


def frame(opcode: int, payload: bytes = b"") -> bytes:
    return _FRAME.pack(len(payload), opcode) + payload


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def recv_frame(sock: socket.socket) -> tuple[int, bytes] | None:
    """Read one frame; returns None on a clean EOF before the header."""
    head = sock.recv(_FRAME.size)
    if not head:
        return None
    if len(head) < _FRAME.size:
        head += recv_exact(sock, _FRAME.size - len(head))
    length, opcode = _FRAME.unpack(head)
    if length > HARD_FRAME_LIMIT:
        raise ConnectionError(f"frame of {length} bytes exceeds hard limit")
    return opcode, recv_exact(sock, length)


def record_dtype(width: int) -> np.dtype:
    return np.dtype([("key", "<u8"), ("vec", "<f4", (width,))])


def encode_keys(keys) -> bytes:
    keys = np.asarray(keys, dtype="<u8")
    return _COUNT.pack(len(keys)) + keys.tobytes()


def decode_keys(payload: bytes) -> np.ndarray:
    if len(payload) < 4:
        raise ProtocolError(ERR_MALFORMED, "missing key count")
    (n,) = _COUNT.unpack_from(payload)
    if n > MAX_BATCH:
        raise ProtocolError(ERR_BATCH_TOO_LARGE, f"batch of {n} exceeds {MAX_BATCH}")
    if n == 0:
        raise ProtocolError(ERR_MALFORMED, "empty batch")
    if len(payload) != 4 + 8 * n:
        raise ProtocolError(ERR_MALFORMED, f"expected {4 + 8 * n} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<u8", count=n, offset=4)


def encode_records(keys, vectors: np.ndarray) -> bytes:
    keys = np.asarray(keys, dtype="<u8")
    vectors = np.asarray(vectors, dtype="<f4")
    table = np.empty(len(keys), dtype=record_dtype(vectors.shape[1]))
    table["key"] = keys
    table["vec"] = vectors
    return _COUNT.pack(len(keys)) + table.tobytes()


def decode_records(payload: bytes, width: int, max_batch: int | None = MAX_BATCH):
    """Parse ``u32 n, n x [u64 key, width x f32]`` into ``(keys, vectors)``."""
    if len(payload) < 4:
        raise ProtocolError(ERR_MALFORMED, "missing record count")
    (n,) = _COUNT.unpack_from(payload)
    if max_batch is not None and n > max_batch:
        raise ProtocolError(ERR_BATCH_TOO_LARGE, f"batch of {n} exceeds {max_batch}")
    rec = record_dtype(width)
    if len(payload) != 4 + n * rec.itemsize:
        raise ProtocolError(ERR_WIDTH, f"payload of {len(payload)} bytes does not hold "
                                       f"{n} vectors of width {width}")
    table = np.frombuffer(payload, dtype=rec, count=n, offset=4)
    return table["key"], table["vec"].reshape(n, width)


def encode_error(code: int, detail: str) -> bytes:
    raw = detail.encode("utf-8")[:0xFFFF]
    return _ERROR.pack(code, len(raw)) + raw


def decode_error(payload: bytes) -> ProtocolError:
    code, n = _ERROR.unpack_from(payload)
    return ProtocolError(code, payload[4:4 + n].decode("utf-8", "replace"))


def encode_counters(values) -> bytes:
    return struct.pack("<5Q", *values)


def decode_counters(payload: bytes) -> tuple[int, ...]:
    return struct.unpack("<5Q", payload)
