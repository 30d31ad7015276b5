"""Message links between one coordinator and M parties.

Two backends share one interface.  :class:`LocalBus` passes encoded frames
through in-memory queues (parties run as threads); :class:`TcpCoordinatorLink`
and :class:`TcpPartyLink` carry the same frames over sockets.  Both encode
and decode every message, so the codec is exercised identically.

Coordinator links address parties by connection index; the protocol layer
maps connections to party ids at registration.
"""
from __future__ import annotations

import queue
import selectors
import socket
import time

from .wire import FrameBuffer, Message, ProtocolError, decode, encode

DEFAULT_TIMEOUT = 30.0


class TransportError(RuntimeError):
    pass


class TransportTimeout(TransportError):
    pass


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected ADDR:PORT, got {addr!r}")
    return host or "127.0.0.1", int(port)


# ------------------------------------------------------------ in-process

class LocalBus:
    """In-memory frame bus for one coordinator and ``n_parties`` parties."""

    def __init__(self, n_parties: int):
        self.n_parties = n_parties
        self._up: queue.Queue = queue.Queue()
        self._down = [queue.Queue() for _ in range(n_parties)]

    def coordinator_link(self) -> "LocalCoordinatorLink":
        return LocalCoordinatorLink(self)

    def party_link(self, conn: int) -> "LocalPartyLink":
        if not 0 <= conn < self.n_parties:
            raise ValueError(f"connection index {conn} out of range")
        return LocalPartyLink(self, conn)


class LocalCoordinatorLink:
    def __init__(self, bus: LocalBus):
        self._bus = bus
        self.n_connections = bus.n_parties

    def accept(self, timeout: float = DEFAULT_TIMEOUT) -> None:
        pass

    def send(self, conn: int, msg: Message) -> None:
        self._bus._down[conn].put(encode(msg))

    def recv_any(self, timeout: float = DEFAULT_TIMEOUT) -> tuple[int, Message]:
        try:
            conn, frame = self._bus._up.get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"no message within {timeout:g} s") from None
        return conn, decode(frame)

    def close(self) -> None:
        pass


class LocalPartyLink:
    def __init__(self, bus: LocalBus, conn: int):
        self._bus = bus
        self._conn = conn

    def connect(self, timeout: float = DEFAULT_TIMEOUT) -> None:
        pass

    def send(self, msg: Message) -> None:
        self._bus._up.put((self._conn, encode(msg)))

    def recv(self, timeout: float = DEFAULT_TIMEOUT) -> Message:
        try:
            frame = self._bus._down[self._conn].get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"no message within {timeout:g} s") from None
        return decode(frame)

    def close(self) -> None:
        pass


# ------------------------------------------------------------------- TCP

class TcpCoordinatorLink:
    """Listening side; accepts exactly ``n_connections`` parties."""

    def __init__(self, address: str, n_connections: int):
        host, port = parse_address(address)
        self.n_connections = n_connections
        self._server = socket.create_server((host, port))
        self.address = "%s:%d" % self._server.getsockname()[:2]
        self._socks: list[socket.socket] = []
        self._bufs: list[FrameBuffer] = []
        self._sel = selectors.DefaultSelector()

    def accept(self, timeout: float = DEFAULT_TIMEOUT) -> None:
        deadline = time.monotonic() + timeout
        while len(self._socks) < self.n_connections:
            left = deadline - time.monotonic()
            if left <= 0:
                raise TransportTimeout(
                    f"only {len(self._socks)} of {self.n_connections} parties connected within {timeout:g} s")
            self._server.settimeout(left)
            try:
                sock, _ = self._server.accept()
            except socket.timeout:
                continue
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(timeout)
            self._sel.register(sock, selectors.EVENT_READ, len(self._socks))
            self._socks.append(sock)
            self._bufs.append(FrameBuffer())

    def send(self, conn: int, msg: Message) -> None:
        try:
            self._socks[conn].sendall(encode(msg))
        except OSError as exc:
            raise TransportError(f"send to connection {conn} failed: {exc}") from exc

    def recv_any(self, timeout: float = DEFAULT_TIMEOUT) -> tuple[int, Message]:
        deadline = time.monotonic() + timeout
        while True:
            for conn, buf in enumerate(self._bufs):
                msg = buf.pop()
                if msg is not None:
                    return conn, msg
            left = deadline - time.monotonic()
            if left <= 0:
                raise TransportTimeout(f"no message within {timeout:g} s")
            for key, _ in self._sel.select(left):
                conn = key.data
                try:
                    data = self._socks[conn].recv(1 << 16)
                except OSError as exc:
                    raise TransportError(f"connection {conn} failed: {exc}") from exc
                if not data:
                    raise TransportError(f"connection {conn} closed by peer")
                self._bufs[conn].feed(data)

    def close(self) -> None:
        for s in self._socks:
            try:
                self._sel.unregister(s)
            except (KeyError, ValueError):
                pass
            s.close()
        self._sel.close()
        self._server.close()


class TcpPartyLink:
    def __init__(self, address: str):
        self._addr = parse_address(address)
        self._sock: socket.socket | None = None
        self._buf = FrameBuffer()

    def connect(self, timeout: float = DEFAULT_TIMEOUT) -> None:
        deadline = time.monotonic() + timeout
        while True:
            try:
                self._sock = socket.create_connection(self._addr, timeout=max(deadline - time.monotonic(), 0.01))
                break
            except OSError as exc:
                # coordinator may not be listening yet
                if time.monotonic() >= deadline:
                    raise TransportTimeout(f"could not reach coordinator at {self._addr}: {exc}") from exc
                time.sleep(0.05)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, msg: Message) -> None:
        try:
            self._sock.sendall(encode(msg))
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from exc

    def recv(self, timeout: float = DEFAULT_TIMEOUT) -> Message:
        deadline = time.monotonic() + timeout
        while True:
            msg = self._buf.pop()
            if msg is not None:
                return msg
            left = deadline - time.monotonic()
            if left <= 0:
                raise TransportTimeout(f"no message within {timeout:g} s")
            self._sock.settimeout(left)
            try:
                data = self._sock.recv(1 << 16)
            except socket.timeout:
                continue
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from exc
            if not data:
                raise TransportError("coordinator closed the connection")
            self._buf.feed(data)

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


class RecordingLink:
    """Party-link wrapper keeping every outgoing frame, as bytes, in ``sent``
    and every incoming message in ``received``."""

    def __init__(self, inner):
        self.inner = inner
        self.sent: list[bytes] = []
        self.received: list[Message] = []

    def connect(self, timeout: float = DEFAULT_TIMEOUT) -> None:
        self.inner.connect(timeout)

    def send(self, msg: Message) -> None:
        self.sent.append(encode(msg))
        self.inner.send(msg)

    def recv(self, timeout: float = DEFAULT_TIMEOUT) -> Message:
        msg = self.inner.recv(timeout)
        self.received.append(msg)
        return msg

    def close(self) -> None:
        self.inner.close()


__all__ = [
    "DEFAULT_TIMEOUT", "LocalBus", "ProtocolError", "RecordingLink", "TcpCoordinatorLink",
    "TcpPartyLink", "TransportError", "TransportTimeout", "parse_address",
]
