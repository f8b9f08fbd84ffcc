"""Learner-side access to the parameter server.

``ParamClient`` talks to one or more servers over TCP; ``LocalParamClient``
drives in-process ``ParamStore`` objects through the same chunking, sharding
and accounting code, so both produce identical results and traffic logs.
"""
from __future__ import annotations

import logging
import socket
import struct
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import protocol as proto
from .hashing import shard_array
from .server import ParamStore, ServerCounters, parse_address

log = logging.getLogger(__name__)

DEFAULT_BATCH = 512


class TransportError(ConnectionError):
    """The parameter server could not be reached after all retries."""


@dataclass
class TrafficLog:
    keys_fetched: int = 0
    keys_written: int = 0
    round_trips: int = 0
    bytes: int = 0
    # per key class, e.g. {"u_fetched": 10, "g_written": 2}
    by_class: Counter = field(default_factory=Counter)

    def record(self, kind: str, direction: str, keys: int, trips: int, nbytes: int):
        if direction == "fetched":
            self.keys_fetched += keys
        else:
            self.keys_written += keys
        self.round_trips += trips
        self.bytes += nbytes
        self.by_class[f"{kind}_{direction}"] += keys

    def merge(self, other: TrafficLog) -> TrafficLog:
        self.keys_fetched += other.keys_fetched
        self.keys_written += other.keys_written
        self.round_trips += other.round_trips
        self.bytes += other.bytes
        self.by_class.update(other.by_class)
        return self

    def copy(self) -> TrafficLog:
        return TrafficLog().merge(self)

    def count(self, kind: str, direction: str | None = None) -> int:
        if direction is None:
            return self.by_class[f"{kind}_fetched"] + self.by_class[f"{kind}_written"]
        return self.by_class[f"{kind}_{direction}"]

    def to_dict(self) -> dict:
        return {"keys_fetched": self.keys_fetched, "keys_written": self.keys_written,
                "round_trips": self.round_trips, "bytes": self.bytes,
                "by_class": dict(sorted(self.by_class.items()))}


class _BaseClient:
    num_shards: int

    def __init__(self, width: int, max_batch: int = DEFAULT_BATCH):
        if not 1 <= max_batch <= proto.MAX_BATCH:
            raise ValueError(f"max_batch must lie in [1, {proto.MAX_BATCH}]")
        self.width = width
        self.max_batch = max_batch
        self.log = TrafficLog()

    def _chunks(self, keys: np.ndarray):
        """Yield ``(shard, positions)`` for every request needed to cover ``keys``."""
        if self.num_shards == 1:
            shards = np.zeros(len(keys), dtype=np.int64)
        else:
            shards = shard_array(keys, self.num_shards)
        for s in range(self.num_shards):
            pos = np.flatnonzero(shards == s)
            for start in range(0, len(pos), self.max_batch):
                yield s, pos[start:start + self.max_batch]

    def fetch_batch(self, keys, kind: str = "u") -> np.ndarray:
        """Vectors for ``keys`` as an ``(n, width)`` float32 array in request order."""
        keys = np.ascontiguousarray(keys, dtype=np.uint64)
        out = np.empty((len(keys), self.width), dtype=np.float32)
        trips = nbytes = 0
        for shard, pos in self._chunks(keys):
            out[pos] = self._get(shard, keys[pos])
            trips += 1
            nbytes += 9 + 8 * len(pos) + 9 + len(pos) * (8 + 4 * self.width)
        self.log.record(kind, "fetched", len(keys), trips, nbytes)
        return out

    def write_batch(self, keys, vectors, kind: str = "u") -> None:
        keys = np.ascontiguousarray(keys, dtype=np.uint64)
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[1] != self.width:
            raise ValueError(f"vectors must have width {self.width}, got shape {vectors.shape}")
        if len(vectors) != len(keys):
            raise ValueError("keys and vectors differ in length")
        if len(keys) == 0:
            return
        trips = nbytes = 0
        for shard, pos in self._chunks(keys):
            self._put(shard, keys[pos], vectors[pos])
            trips += 1
            nbytes += 9 + len(pos) * (8 + 4 * self.width) + 9
        self.log.record(kind, "written", len(keys), trips, nbytes)

    def take_log(self) -> TrafficLog:
        log_, self.log = self.log, TrafficLog()
        return log_

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LocalParamClient(_BaseClient):
    """Client surface over in-process stores; one store per shard."""

    def __init__(self, stores, max_batch: int = DEFAULT_BATCH):
        stores = [stores] if isinstance(stores, ParamStore) else list(stores)
        super().__init__(stores[0].width, max_batch)
        self.stores = stores
        self.num_shards = len(stores)

    def _get(self, shard, keys):
        return self.stores[shard].get_batch(keys)

    def _put(self, shard, keys, vectors):
        self.stores[shard].put_batch(keys, vectors)

    def server_counters(self, shard: int = 0) -> ServerCounters:
        return self.stores[shard].snapshot()


class ParamClient(_BaseClient):
    """Networked client; ``addresses`` lists one ``host:port`` per shard."""

    def __init__(self, addresses, width: int, max_batch: int = DEFAULT_BATCH,
                 retries: int = 3, backoff: float = 0.2, timeout: float = 5.0):
        super().__init__(width, max_batch)
        if isinstance(addresses, str):
            addresses = addresses.split(",")
        self.addresses = [parse_address(a) for a in addresses]
        self.num_shards = len(self.addresses)
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self._socks: list[socket.socket | None] = [None] * self.num_shards

    def _connect(self, shard: int) -> socket.socket:
        sock = self._socks[shard]
        if sock is None:
            sock = socket.create_connection(self.addresses[shard], timeout=self.timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._socks[shard] = sock
        return sock

    def _drop(self, shard: int):
        sock = self._socks[shard]
        self._socks[shard] = None
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass

    def request(self, shard: int, opcode: int, payload: bytes) -> tuple[int, bytes]:
        """Send one frame and return the reply, retrying transport failures."""
        msg = proto.frame(opcode, payload)
        for attempt in range(self.retries + 1):
            try:
                sock = self._connect(shard)
                sock.sendall(msg)
                reply = proto.recv_frame(sock)
                if reply is None:
                    raise ConnectionError("server closed the connection")
            except OSError as exc:
                self._drop(shard)
                if attempt == self.retries:
                    raise TransportError(
                        f"shard {shard} at {self.addresses[shard]} unreachable: {exc}") from exc
                delay = self.backoff * 2 ** attempt
                log.warning("request to shard %d failed (%s); retrying in %.2fs",
                            shard, exc, delay)
                time.sleep(delay)
                continue
            opcode_in, body = reply
            if opcode_in == proto.OP_ERROR:
                raise proto.decode_error(body)
            return opcode_in, body
        raise AssertionError("unreachable")

    def _get(self, shard, keys):
        op, body = self.request(shard, proto.OP_GET_BATCH, proto.encode_keys(keys))
        if op != proto.REPLY_GET_BATCH:
            raise proto.ProtocolError(proto.ERR_MALFORMED, f"unexpected reply {op:#04x}")
        got_keys, vectors = proto.decode_records(body, self.width, max_batch=None)
        if not np.array_equal(got_keys, keys):
            raise proto.ProtocolError(proto.ERR_MALFORMED, "reply keys do not match request")
        return vectors

    def _put(self, shard, keys, vectors):
        op, body = self.request(shard, proto.OP_PUT_BATCH, proto.encode_records(keys, vectors))
        if op != proto.REPLY_PUT_BATCH:
            raise proto.ProtocolError(proto.ERR_MALFORMED, f"unexpected reply {op:#04x}")
        (acked,) = struct.unpack("<I", body)
        if acked != len(keys):
            raise proto.ProtocolError(proto.ERR_MALFORMED, f"{acked} of {len(keys)} acked")

    def server_counters(self, shard: int = 0) -> ServerCounters:
        op, body = self.request(shard, proto.OP_STATS, b"")
        return ServerCounters(*proto.decode_counters(body))

    def close(self):
        for s in range(self.num_shards):
            self._drop(s)

