"""Pluggable duplex connections carrying framed envelopes.

Frame layout on every transport: a 4-byte big-endian unsigned body length
followed by the UTF-8 JSON body of one envelope. The in-process transport
moves the same frames through queues, so both paths share the codec.
"""

from __future__ import annotations

import json
import logging
import queue
import select
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Any, Callable

from .errors import DecodeError, TransportError
from .protocol import Envelope

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
DEFAULT_MAX_FRAME = 16 * 1024 * 1024


def encode_body(env: Envelope) -> bytes:
    return json.dumps(env.to_dict(), separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_frame(env: Envelope, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    body = encode_body(env)
    if len(body) > max_frame:
        raise TransportError(f"frame too large: {len(body)} bytes exceeds cap of {max_frame}")
    return HEADER.pack(len(body)) + body


def decode_body(body: bytes) -> Envelope:
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"malformed frame body: {exc}") from exc
    return Envelope.from_dict(doc)


def decode_frame(data: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> Envelope:
    """Decode exactly one complete frame held in ``data``."""
    if len(data) < HEADER.size:
        raise TransportError("truncated frame header")
    (length,) = HEADER.unpack_from(data)
    if length > max_frame:
        raise TransportError(f"frame too large: {length} bytes exceeds cap of {max_frame}")
    body = data[HEADER.size :]
    if len(body) < length:
        raise TransportError(f"truncated frame: expected {length} body bytes, got {len(body)}")
    if len(body) > length:
        raise DecodeError(f"{len(body) - length} trailing bytes after frame")
    return decode_body(body)


@dataclass(frozen=True)
class Endpoint:
    id: str
    address: str
    transport: str = "tcp"


class Connection:
    """One end of a duplex link. One reader at a time; sends are serialized."""

    peer: str = ""

    def send(self, env: Envelope) -> None:
        raise NotImplementedError

    def recv(self, timeout: float | None = None) -> Envelope:
        raise NotImplementedError

    def poll(self) -> Envelope | None:
        """Non-blocking receive: the next envelope, or None if nothing is queued."""
        try:
            return self.recv(timeout=0)
        except TimeoutError:
            return None

    def close(self) -> None:
        raise NotImplementedError

    @property
    def closed(self) -> bool:
        raise NotImplementedError


# -- in-process --------------------------------------------------------------

_EOF = object()


class InProcessConnection(Connection):
    def __init__(self, inbox: "queue.Queue[Any]", outbox: "queue.Queue[Any]", peer: str, max_frame: int):
        self._in = inbox
        self._out = outbox
        self.peer = peer
        self.max_frame = max_frame
        self._closed = threading.Event()
        self._lock = threading.Lock()

    def send(self, env: Envelope) -> None:
        frame = encode_frame(env, self.max_frame)
        with self._lock:
            if self._closed.is_set():
                raise TransportError(f"connection to {self.peer} is closed")
            self._out.put(frame)

    def recv(self, timeout: float | None = None) -> Envelope:
        if self._closed.is_set() and self._in.empty():
            raise TransportError(f"connection to {self.peer} is closed")
        try:
            item = self._in.get(block=timeout != 0, timeout=timeout if timeout else None)
        except queue.Empty:
            raise TimeoutError("no frame available") from None
        if item is _EOF:
            with self._lock:
                self._closed.set()
            raise TransportError(f"connection closed by {self.peer}")
        return decode_frame(item, self.max_frame)

    def close(self) -> None:
        with self._lock:
            if self._closed.is_set():
                return
            self._closed.set()
            self._out.put(_EOF)
        # wake our own reader, if any
        self._in.put(_EOF)

    @property
    def closed(self) -> bool:
        return self._closed.is_set()


def in_process_pair(
    a_name: str = "a", b_name: str = "b", max_frame: int = DEFAULT_MAX_FRAME
) -> tuple[InProcessConnection, InProcessConnection]:
    ab: queue.Queue[Any] = queue.Queue()
    ba: queue.Queue[Any] = queue.Queue()
    return InProcessConnection(ba, ab, b_name, max_frame), InProcessConnection(ab, ba, a_name, max_frame)


class Listener:
    address: str = ""

    def close(self) -> None:
        raise NotImplementedError


_hub: dict[str, "InProcessListener"] = {}
_hub_lock = threading.Lock()


class InProcessListener(Listener):
    def __init__(self, key: str, on_connect: Callable[[Connection], None], max_frame: int):
        self.address = key
        self.on_connect = on_connect
        self.max_frame = max_frame
        self._count = 0
        self._lock = threading.Lock()

    def accept(self, client_name: str) -> Connection:
        with self._lock:
            self._count += 1
            n = self._count
        server_side, client_side = in_process_pair(f"{client_name}#{n}", self.address, self.max_frame)
        self.on_connect(server_side)
        return client_side

    def close(self) -> None:
        with _hub_lock:
            if _hub.get(self.address) is self:
                del _hub[self.address]


# -- TCP ---------------------------------------------------------------------


class TcpConnection(Connection):
    def __init__(self, sock: socket.socket, peer: str, max_frame: int = DEFAULT_MAX_FRAME):
        self.sock = sock
        self.peer = peer
        self.max_frame = max_frame
        self._send_lock = threading.Lock()
        self._closed = False
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, env: Envelope) -> None:
        frame = encode_frame(env, self.max_frame)
        with self._send_lock:
            if self._closed:
                raise TransportError(f"connection to {self.peer} is closed")
            try:
                self.sock.sendall(frame)
            except OSError as exc:
                raise TransportError(f"send to {self.peer} failed: {exc}") from exc

    def _read_exact(self, n: int, at_frame_start: bool) -> bytes:
        chunks = []
        got = 0
        while got < n:
            try:
                chunk = self.sock.recv(n - got)
            except OSError as exc:
                raise TransportError(f"receive from {self.peer} failed: {exc}") from exc
            if not chunk:
                if at_frame_start and got == 0:
                    raise TransportError(f"connection closed by {self.peer}")
                raise TransportError(f"truncated frame from {self.peer}: connection closed mid-frame")
            chunks.append(chunk)
            got += len(chunk)
            at_frame_start = False
        return b"".join(chunks)

    def recv(self, timeout: float | None = None) -> Envelope:
        if self._closed:
            raise TransportError(f"connection to {self.peer} is closed")
        if timeout is not None:
            try:
                ready, _, _ = select.select([self.sock], [], [], timeout)
            except (OSError, ValueError) as exc:
                raise TransportError(f"connection to {self.peer} is closed") from exc
            if not ready:
                raise TimeoutError("no frame available")
        (length,) = HEADER.unpack(self._read_exact(HEADER.size, True))
        if length > self.max_frame:
            self.close()
            raise TransportError(f"frame too large: {length} bytes exceeds cap of {self.max_frame}")
        return decode_body(self._read_exact(length, False))

    def close(self) -> None:
        with self._send_lock:
            if self._closed:
                return
            self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    @property
    def closed(self) -> bool:
        return self._closed


def parse_hostport(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep:
        raise TransportError(f"address {address!r} is not host:port")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise TransportError(f"address {address!r} has a non-numeric port") from None


class TcpListener(Listener):
    def __init__(self, address: str, on_connect: Callable[[Connection], None], max_frame: int):
        host, port = parse_hostport(address)
        self.max_frame = max_frame
        self.on_connect = on_connect
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._sock.bind((host, port))
        except OSError as exc:
            self._sock.close()
            raise TransportError(f"cannot bind {address}: {exc}") from exc
        self._sock.listen(64)
        bound_host, bound_port = self._sock.getsockname()[:2]
        self.address = f"{bound_host}:{bound_port}"
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._accept_loop, name=f"accept-{self.address}", daemon=True)
        self._thread.start()

    @property
    def port(self) -> int:
        return parse_hostport(self.address)[1]

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, addr = self._sock.accept()
            except OSError:
                break
            self.on_connect(TcpConnection(sock, f"{addr[0]}:{addr[1]}", self.max_frame))

    def close(self) -> None:
        self._stop.set()
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def serve(
    endpoint: Endpoint, on_connect: Callable[[Connection], None], max_frame: int = DEFAULT_MAX_FRAME
) -> Listener:
    """Start accepting connections at ``endpoint``; ``on_connect`` runs once per connection."""
    if endpoint.transport == "in_process":
        with _hub_lock:
            if endpoint.address in _hub:
                raise TransportError(f"in-process address {endpoint.address!r} already in use")
            listener = InProcessListener(endpoint.address, on_connect, max_frame)
            _hub[endpoint.address] = listener
        return listener
    if endpoint.transport == "tcp":
        return TcpListener(endpoint.address, on_connect, max_frame)
    raise TransportError(f"unknown transport {endpoint.transport!r}")


def connect(
    transport: str,
    address: str,
    *,
    client_name: str = "client",
    timeout: float = 10.0,
    max_frame: int = DEFAULT_MAX_FRAME,
) -> Connection:
    if transport == "in_process":
        with _hub_lock:
            listener = _hub.get(address)
        if listener is None:
            raise TransportError(f"connection refused: no in-process listener at {address!r}")
        return listener.accept(client_name)
    if transport == "tcp":
        host, port = parse_hostport(address)
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {address}: {exc}") from exc
        sock.settimeout(None)
        return TcpConnection(sock, address, max_frame)
    raise TransportError(f"unknown transport {transport!r}")


def start_reader(
    conn: Connection,
    deliver: Callable[[Connection, Envelope | None, str | None], None],
    name: str = "reader",
) -> threading.Thread:
    """Run the connection's single receive loop on a daemon thread.

    Each envelope is handed to ``deliver``; a final ``deliver(conn, None, reason)``
    marks the end of the connection. Undecodable frames drop the connection.
    """

    def loop() -> None:
        while True:
            try:
                env = conn.recv()
            except DecodeError as exc:
                log.warning("dropping connection %s: %s", conn.peer, exc)
                conn.close()
                deliver(conn, None, f"decode error: {exc}")
                return
            except TransportError as exc:
                deliver(conn, None, str(exc))
                return
            deliver(conn, env, None)

    t = threading.Thread(target=loop, name=name, daemon=True)
    t.start()
    return t
