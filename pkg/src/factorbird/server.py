"""Parameter server: a threaded TCP key-value store for rows of U.

Vectors are stored as immutable byte strings, so a put swaps a whole vector
in a single reference assignment and concurrent readers never observe a
half-written vector. Unknown keys are initialised lazily and
deterministically from ``(init_seed, key)``.
"""
from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from dataclasses import astuple, dataclass

import numpy as np

from . import protocol as proto
from .hashing import is_reserved
from .model import ModelLayout, init_vector

log = logging.getLogger(__name__)

U_DOMAIN = 0
V_DOMAIN = 1


@dataclass(frozen=True)
class ServerConfig:
    width: int
    bind: str = "127.0.0.1:0"
    init_seed: int = 0
    init_stddev: float = 0.01
    stride: int | None = None
    stream_offset: int = 0

    def __post_init__(self):
        if self.width < 2:
            raise ValueError("width must be at least 2")
        stride = self.stride or self.width
        if stride < 2 or self.width % stride:
            raise ValueError(f"stride {stride} does not divide width {self.width}")

    @property
    def layout(self) -> ModelLayout:
        stride = self.stride or self.width
        return ModelLayout(k=stride - 1, num_models=self.width // stride)


@dataclass
class ServerCounters:
    gets: int = 0
    puts: int = 0
    lazy_inits: int = 0
    bytes_in: int = 0
    bytes_out: int = 0


def lazy_init_vector(key: int, width: int, init_seed: int, stddev: float,
                     layout: ModelLayout, stream_offset: int = 0,
                     domain: int = U_DOMAIN) -> np.ndarray:
    """The initial vector of a never-written key.

    Reserved global-bias keys start at zero; every other key draws from a
    generator seeded by ``(init_seed, domain, key)``.
    """
    vec = np.zeros(width, dtype=np.float32)
    if not (domain == U_DOMAIN and is_reserved(key)):
        init_vector(vec, [init_seed, domain, key], stddev, layout, stream_offset)
    return vec


class ParamStore:
    """The key-value state behind a server, also usable in-process."""

    def __init__(self, config: ServerConfig):
        self.config = config
        self.width = config.width
        self._layout = config.layout
        self._data: dict[int, bytes] = {}
        self._lock = threading.Lock()
        self.counters = ServerCounters()

    def _count(self, **deltas):
        with self._lock:
            for name, d in deltas.items():
                setattr(self.counters, name, getattr(self.counters, name) + d)

    def initial_vector(self, key: int) -> np.ndarray:
        c = self.config
        return lazy_init_vector(key, c.width, c.init_seed, c.init_stddev,
                                self._layout, c.stream_offset)

    def get_batch(self, keys) -> np.ndarray:
        data = self._data
        out = []
        inits = 0
        for key in np.asarray(keys, dtype=np.uint64).tolist():
            raw = data.get(key)
            if raw is None:
                fresh = self.initial_vector(key).tobytes()
                # setdefault keeps whichever initialisation won a race; both are equal
                raw = data.setdefault(key, fresh)
                inits += 1
            out.append(raw)
        self._count(gets=len(out), lazy_inits=inits)
        if not out:
            return np.zeros((0, self.width), dtype=np.float32)
        return np.frombuffer(b"".join(out), dtype="<f4").reshape(len(out), self.width).copy()

    def put_batch(self, keys, vectors) -> int:
        keys = np.asarray(keys, dtype=np.uint64)
        vectors = np.asarray(vectors, dtype="<f4")
        if vectors.shape != (len(keys), self.width):
            raise ValueError(f"expected vectors of shape ({len(keys)}, {self.width}), "
                             f"got {vectors.shape}")
        data = self._data
        for key, vec in zip(keys.tolist(), vectors):
            data[key] = vec.tobytes()
        self._count(puts=len(keys))
        return len(keys)

    def snapshot(self) -> ServerCounters:
        with self._lock:
            return ServerCounters(*astuple(self.counters))

    def __len__(self):
        return len(self._data)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        store: ParamStore = self.server.store
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                got = proto.recv_frame(sock)
            except (ConnectionError, OSError):
                return
            if got is None:
                return
            opcode, payload = got
            store._count(bytes_in=len(payload) + 5)
            try:
                reply = self.dispatch(store, opcode, payload)
            except proto.ProtocolError as exc:
                reply = proto.frame(proto.OP_ERROR, proto.encode_error(exc.code, exc.detail))
            except Exception as exc:  # keep the connection alive on handler bugs
                log.exception("request failed")
                reply = proto.frame(proto.OP_ERROR,
                                    proto.encode_error(proto.ERR_INTERNAL, str(exc)))
            store._count(bytes_out=len(reply))
            try:
                sock.sendall(reply)
            except OSError:
                return

    @staticmethod
    def dispatch(store: ParamStore, opcode: int, payload: bytes) -> bytes:
        if opcode == proto.OP_GET_BATCH:
            keys = proto.decode_keys(payload)
            vectors = store.get_batch(keys)
            return proto.frame(proto.REPLY_GET_BATCH, proto.encode_records(keys, vectors))
        if opcode == proto.OP_PUT_BATCH:
            keys, vectors = proto.decode_records(payload, store.width)
            if len(keys) == 0:
                raise proto.ProtocolError(proto.ERR_MALFORMED, "empty batch")
            acked = store.put_batch(keys, vectors)
            return proto.frame(proto.REPLY_PUT_BATCH, struct.pack("<I", acked))
        if opcode == proto.OP_STATS:
            return proto.frame(proto.REPLY_STATS,
                               proto.encode_counters(astuple(store.snapshot())))
        raise proto.ProtocolError(proto.ERR_UNKNOWN_OPCODE, f"unknown opcode {opcode:#04x}")


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


class ServerHandle:
    """A running server; use as a context manager or call ``shutdown``."""

    def __init__(self, config: ServerConfig, store: ParamStore | None = None):
        self.store = store or ParamStore(config)
        try:
            self._server = _TCPServer(parse_address(config.bind), _Handler)
        except OSError as exc:
            raise RuntimeError(f"cannot bind {config.bind}: {exc}") from exc
        self._server.store = self.store
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name="param-server", daemon=True)
        self._thread.start()

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    @property
    def counters(self) -> ServerCounters:
        return self.store.snapshot()

    def serve_forever(self):
        self._thread.join()

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(config: ServerConfig) -> ServerHandle:
    handle = ServerHandle(config)
    log.info("parameter server listening on %s (width %d)", handle.address, config.width)
    return handle
