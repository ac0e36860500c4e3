"""Mobile/cloud wire protocol and channels.

Frame layout (big-endian)::

    u32 magic 0x4D4F4348 | u8 type | u64 device id | u32 payload length | payload

Two channel bindings share the codec: ``SimLink`` is a bandwidth/latency
shaped FIFO link on virtual time, ``SocketBridge`` pushes every frame
through a real TCP connection on localhost.
"""
from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field, fields
from typing import Callable, ClassVar

import numpy as np

from .taxonomy import Path, TableDecodeError, decode_path, encode_path
from .world import ExpertModel

MAGIC = 0x4D4F4348
HEADER = struct.Struct(">IBQI")


class DecodeError(ValueError):
    pass


class ChannelClosed(ConnectionError):
    pass


def _path_size(path: Path) -> int:
    return 1 + sum(2 + len(v.encode("utf-8")) for v in path)


@dataclass(kw_only=True, eq=False)
class Message:
    TYPE: ClassVar[int] = -1
    device_id: int = 0

    def payload(self) -> bytes:
        raise NotImplementedError

    def payload_size(self) -> int:
        return len(self.payload())

    def wire_size(self) -> int:
        return HEADER.size + self.payload_size()

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return encode_frame(self) == encode_frame(other)

    def __repr__(self):
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v = f"array{v.shape}"
            elif isinstance(v, ExpertModel):
                v = f"model{v.key}"
            elif isinstance(v, bytes) and len(v) > 16:
                v = f"<{len(v)} bytes>"
            parts.append(f"{f.name}={v!r}")
        return f"{type(self).__name__}({', '.join(parts)})"


@dataclass(kw_only=True, eq=False, repr=False)
class Hello(Message):
    TYPE: ClassVar[int] = 0

    def payload(self) -> bytes:
        return b""

    @classmethod
    def parse(cls, device_id, buf):
        if buf:
            raise DecodeError("hello carries no payload")
        return cls(device_id=device_id)


@dataclass(kw_only=True, eq=False, repr=False)
class FrameBatchUpload(Message):
    TYPE: ClassVar[int] = 1
    window_id: int
    handle: int
    features: np.ndarray
    frame_bytes: int = 0

    def payload(self) -> bytes:
        x = np.ascontiguousarray(self.features, dtype=">f8")
        n, d = x.shape
        return (struct.pack(">IQIH", self.window_id, self.handle, n, d) + x.tobytes()
                + struct.pack(">I", self.frame_bytes) + bytes(self.frame_bytes))

    def payload_size(self) -> int:
        n, d = np.shape(self.features)
        return 18 + 8 * n * d + 4 + self.frame_bytes

    @property
    def n_frames(self) -> int:
        return int(np.shape(self.features)[0])

    @classmethod
    def parse(cls, device_id, buf):
        window_id, handle, n, d = struct.unpack_from(">IQIH", buf, 0)
        off = 18
        if off + 8 * n * d + 4 > len(buf):
            raise DecodeError("truncated feature block")
        x = np.frombuffer(buf, ">f8", n * d, off).astype(np.float64).reshape(n, d)
        off += 8 * n * d
        (frame_bytes,) = struct.unpack_from(">I", buf, off)
        if off + 4 + frame_bytes != len(buf):
            raise DecodeError("frame byte count mismatch")
        return cls(device_id=device_id, window_id=window_id, handle=handle,
                   features=x, frame_bytes=frame_bytes)


@dataclass(kw_only=True, eq=False, repr=False)
class DomainVerdict(Message):
    TYPE: ClassVar[int] = 2
    shift_confirmed: bool
    path: Path
    labels: tuple[int, ...] = ()
    handle: int = 0

    def payload(self) -> bytes:
        labels = np.asarray(self.labels, dtype=">i4")
        return (struct.pack(">BQ", 1 if self.shift_confirmed else 0, self.handle)
                + encode_path(tuple(self.path))
                + struct.pack(">I", len(labels)) + labels.tobytes())

    def payload_size(self) -> int:
        return 9 + _path_size(tuple(self.path)) + 4 + 4 * len(self.labels)

    @classmethod
    def parse(cls, device_id, buf):
        flag, handle = struct.unpack_from(">BQ", buf, 0)
        path, off = decode_path(buf, 9)
        (n,) = struct.unpack_from(">I", buf, off)
        off += 4
        if off + 4 * n != len(buf):
            raise DecodeError("label count mismatch")
        labels = tuple(int(v) for v in np.frombuffer(buf, ">i4", n, off))
        return cls(device_id=device_id, shift_confirmed=bool(flag), path=path,
                   labels=labels, handle=handle)


@dataclass(kw_only=True, eq=False, repr=False)
class ModelRequest(Message):
    TYPE: ClassVar[int] = 3
    path: Path

    def payload(self) -> bytes:
        return encode_path(tuple(self.path))

    def payload_size(self) -> int:
        return _path_size(tuple(self.path))

    @classmethod
    def parse(cls, device_id, buf):
        path, off = decode_path(buf, 0)
        if off != len(buf):
            raise DecodeError("trailing bytes after path")
        return cls(device_id=device_id, path=path)


@dataclass(kw_only=True, eq=False, repr=False)
class ModelDispatch(Message):
    """A model blob for `path`; ``model=None`` is a negative acknowledgement."""
    TYPE: ClassVar[int] = 4
    path: Path
    model: ExpertModel | None = None

    @property
    def size(self) -> int:
        return self.model.blob_size() if self.model is not None else 0

    def payload(self) -> bytes:
        blob = self.model.to_blob() if self.model is not None else b""
        return encode_path(tuple(self.path)) + struct.pack(">I", len(blob)) + blob

    def payload_size(self) -> int:
        return _path_size(tuple(self.path)) + 4 + self.size

    @classmethod
    def parse(cls, device_id, buf):
        path, off = decode_path(buf, 0)
        (n,) = struct.unpack_from(">I", buf, off)
        off += 4
        if off + n != len(buf):
            raise DecodeError("blob length mismatch")
        model = None
        if n:
            try:
                model = ExpertModel.from_blob(buf[off:])
            except (ValueError, struct.error) as exc:
                raise DecodeError(f"bad model blob: {exc}") from None
        return cls(device_id=device_id, path=path, model=model)


@dataclass(kw_only=True, eq=False, repr=False)
class TaxonomySync(Message):
    TYPE: ClassVar[int] = 5
    table: bytes

    def payload(self) -> bytes:
        return struct.pack(">I", len(self.table)) + self.table

    def payload_size(self) -> int:
        return 4 + len(self.table)

    @classmethod
    def parse(cls, device_id, buf):
        (n,) = struct.unpack_from(">I", buf, 0)
        if 4 + n != len(buf):
            raise DecodeError("table length mismatch")
        return cls(device_id=device_id, table=bytes(buf[4:]))


@dataclass(kw_only=True, eq=False, repr=False)
class WindowReport(Message):
    TYPE: ClassVar[int] = 6
    window_id: int
    path: Path
    accuracy: float

    def payload(self) -> bytes:
        return (struct.pack(">I", self.window_id) + encode_path(tuple(self.path))
                + struct.pack(">d", self.accuracy))

    def payload_size(self) -> int:
        return 4 + _path_size(tuple(self.path)) + 8

    @classmethod
    def parse(cls, device_id, buf):
        (window_id,) = struct.unpack_from(">I", buf, 0)
        path, off = decode_path(buf, 4)
        if off + 8 != len(buf):
            raise DecodeError("window report length mismatch")
        (acc,) = struct.unpack_from(">d", buf, off)
        return cls(device_id=device_id, window_id=window_id, path=path, accuracy=acc)


@dataclass(kw_only=True, eq=False, repr=False)
class RetrainNotice(Message):
    TYPE: ClassVar[int] = 7
    path: Path
    version: int = 0

    def payload(self) -> bytes:
        return encode_path(tuple(self.path)) + struct.pack(">I", self.version)

    def payload_size(self) -> int:
        return _path_size(tuple(self.path)) + 4

    @classmethod
    def parse(cls, device_id, buf):
        path, off = decode_path(buf, 0)
        if off + 4 != len(buf):
            raise DecodeError("retrain notice length mismatch")
        (version,) = struct.unpack_from(">I", buf, off)
        return cls(device_id=device_id, path=path, version=version)


MESSAGE_TYPES: dict[int, type[Message]] = {
    cls.TYPE: cls for cls in (Hello, FrameBatchUpload, DomainVerdict, ModelRequest,
                              ModelDispatch, TaxonomySync, WindowReport, RetrainNotice)
}


def encode_frame(msg: Message) -> bytes:
    payload = msg.payload()
    return HEADER.pack(MAGIC, msg.TYPE, msg.device_id, len(payload)) + payload


def decode_frame(buf: bytes) -> Message:
    buf = bytes(buf)
    if len(buf) < HEADER.size:
        raise DecodeError("truncated header")
    magic, mtype, device_id, length = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DecodeError("bad magic")
    cls = MESSAGE_TYPES.get(mtype)
    if cls is None:
        raise DecodeError(f"unknown message type {mtype}")
    if HEADER.size + length != len(buf):
        raise DecodeError("length mismatch")
    try:
        return cls.parse(device_id, buf[HEADER.size:])
    except (struct.error, TableDecodeError, ValueError) as exc:
        if isinstance(exc, DecodeError):
            raise
        raise DecodeError(str(exc)) from None


# links ------------------------------------------------------------------

@dataclass(frozen=True)
class LinkModel:
    bandwidth: float = 10e6       # bits/s
    latency: float = 0.02         # s

    def __post_init__(self):
        if self.bandwidth <= 0 or self.latency < 0:
            raise ValueError("bandwidth must be > 0 and latency >= 0")


def transfer_time(size: int, link: LinkModel, queued_bytes: int = 0) -> float:
    if size < 0:
        raise ValueError("negative size")
    return link.latency + (size + queued_bytes) * 8 / link.bandwidth


@dataclass
class Transfer:
    msg: Message
    size: int
    on_delivery: Callable[[Message], None]
    enqueued: float
    start: float | None = None
    end: float | None = None
    cancelled: bool = False
    _done: object = field(default=None, repr=False)


class SimLink:
    """One direction of a device link: a FIFO server on virtual time.

    Serialisation takes ``size * 8 / bandwidth``; propagation latency is
    added on top and does not block the next transfer.
    """

    def __init__(self, sim, model: LinkModel, name: str = "", relay=None):
        self.sim = sim
        self.model = model
        self.name = name
        self.relay = relay
        self.queue: list[Transfer] = []
        self.current: Transfer | None = None
        self.closed = False
        self.sent: list[Message] = []
        self.bytes_sent = 0

    def queued_bytes(self) -> int:
        return sum(t.size for t in self.queue)

    def send(self, msg: Message, on_delivery: Callable[[Message], None]) -> Transfer:
        if self.closed:
            raise ChannelClosed(self.name)
        t = Transfer(msg, msg.wire_size(), on_delivery, self.sim.now)
        self.queue.append(t)
        if self.current is None:
            self._start_next()
        return t

    def _start_next(self):
        if not self.queue:
            self.current = None
            return
        t = self.queue.pop(0)
        t.start = self.sim.now
        t.end = t.start + t.size * 8 / self.model.bandwidth
        self.current = t
        t._done = self.sim.at(t.end, self._finish, t)

    def _finish(self, t: Transfer):
        self.current = None
        self.bytes_sent += t.size
        msg = t.msg if self.relay is None else self.relay(t.msg)
        self.sent.append(msg)
        self.sim.after(self.model.latency, t.on_delivery, msg)
        self._start_next()

    def cancel(self, t: Transfer) -> bool:
        """Drop a transfer that has not finished serialising."""
        if t is self.current:
            t.cancelled = True
            self.sim.cancel(t._done)
            self._start_next()
            return True
        if t in self.queue:
            t.cancelled = True
            self.queue.remove(t)
            return True
        return False


# real sockets -------------------------------------------------------------

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ChannelClosed("peer closed")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> Message:
    head = _recv_exact(sock, HEADER.size)
    length = HEADER.unpack(head)[3]
    return decode_frame(head + _recv_exact(sock, length))


class SocketBridge:
    """Loopback TCP binding with the same framing as the simulated link.

    A listening endpoint accepts one connection per device; the device sends
    ``Hello`` with id 0 and the server answers with the allocated id.  Every
    message relayed through the bridge is encoded, written to the socket,
    read and decoded on the other side, and the decoded copy is returned.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.server = socket.create_server((host, port))
        self.address = self.server.getsockname()
        self._client: dict[int, socket.socket] = {}
        self._server_side: dict[int, socket.socket] = {}
        self._inbox: dict[tuple[int, str], queue.Queue] = {}
        self._threads: list[threading.Thread] = []
        self._next_id = 1
        self._lock = threading.Lock()
        self.timings: list[float] = []

    def connect(self) -> int:
        client = socket.create_connection(self.address)
        client.sendall(encode_frame(Hello(device_id=0)))
        conn, _ = self.server.accept()
        hello = read_frame(conn)
        if not isinstance(hello, Hello):
            raise DecodeError("expected hello")
        with self._lock:
            device_id = self._next_id
            self._next_id += 1
        conn.sendall(encode_frame(Hello(device_id=device_id)))
        reply = read_frame(client)
        assert reply.device_id == device_id
        self._client[device_id] = client
        self._server_side[device_id] = conn
        for direction, sock in (("up", conn), ("down", client)):
            q: queue.Queue = queue.Queue()
            self._inbox[(device_id, direction)] = q
            th = threading.Thread(target=self._reader, args=(sock, q), daemon=True)
            th.start()
            self._threads.append(th)
        return device_id

    @staticmethod
    def _reader(sock: socket.socket, q: queue.Queue):
        while True:
            try:
                q.put(read_frame(sock))
            except (ChannelClosed, OSError, DecodeError) as exc:
                q.put(exc)
                return

    def relay(self, device_id: int, direction: str, msg: Message) -> Message:
        sock = self._client[device_id] if direction == "up" else self._server_side[device_id]
        t0 = time.perf_counter()
        sock.sendall(encode_frame(msg))
        out = self._inbox[(device_id, direction)].get(timeout=30)
        self.timings.append(time.perf_counter() - t0)
        if isinstance(out, Exception):
            raise ChannelClosed(str(out))
        return out

    def close(self):
        for s in [*self._client.values(), *self._server_side.values(), self.server]:
            try:
                s.close()
            except OSError:
                pass
