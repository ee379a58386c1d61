"""Reliable ordered byte streams: in-process loopback and TCP."""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time

from splitvfl.protocol import wire

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


class TransportError(ConnectionError):
    """Connection refused, closed, or timed out.  Distinct from protocol errors."""


class Transport:
    timeout: float = DEFAULT_TIMEOUT

    def send(self, data: bytes) -> None:
        raise NotImplementedError

    def recv_exactly(self, n: int) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # framing
    def send_message(self, msg: wire.Message) -> None:
        self.send(wire.encode_frame(msg))

    def recv_message(self) -> wire.Message:
        length, msg_type = wire.decode_header(self.recv_exactly(wire.HEADER_SIZE))
        return wire.decode_payload(msg_type, self.recv_exactly(length))


_EOF = object()


class LoopbackTransport(Transport):
    """One end of an in-process pipe pair; see :func:`loopback_pair`."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float):
        self._inbox = inbox
        self._outbox = outbox
        self._buf = bytearray()
        self._closed = False
        self._eof = False
        self.timeout = timeout

    def send(self, data: bytes) -> None:
        if self._closed:
            raise TransportError("send on closed loopback transport")
        self._outbox.put(bytes(data))

    def recv_exactly(self, n: int) -> bytes:
        deadline = time.monotonic() + self.timeout
        while len(self._buf) < n:
            if self._eof:
                raise TransportError("peer closed the connection")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TransportError(f"timed out after {self.timeout:g}s waiting for data")
            try:
                chunk = self._inbox.get(timeout=remaining)
            except queue.Empty:
                raise TransportError(f"timed out after {self.timeout:g}s waiting for data") from None
            if chunk is _EOF:
                self._eof = True
            else:
                self._buf += chunk
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_EOF)


def loopback_pair(timeout: float = DEFAULT_TIMEOUT) -> tuple[LoopbackTransport, LoopbackTransport]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return LoopbackTransport(b_to_a, a_to_b, timeout), LoopbackTransport(a_to_b, b_to_a, timeout)


loopback_transport = loopback_pair


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 <= int(port) < 65536:
        raise ValueError(f"address must look like host:port, got {addr!r}")
    return host.strip("[]"), int(port)


class TcpTransport(Transport):
    def __init__(self, sock: socket.socket, timeout: float = DEFAULT_TIMEOUT):
        self._sock = sock
        self.timeout = timeout
        sock.settimeout(timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    @classmethod
    def connect(cls, addr: str, timeout: float = DEFAULT_TIMEOUT, retry_for: float = 0.0) -> "TcpTransport":
        """Connect to ``host:port``; keep retrying refused connections for ``retry_for`` seconds."""
        host, port = parse_address(addr)
        deadline = time.monotonic() + retry_for
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
                return cls(sock, timeout)
            except OSError as exc:
                if time.monotonic() >= deadline:
                    raise TransportError(f"cannot connect to {addr}: {exc}") from None
                time.sleep(0.1)

    @classmethod
    def listen(cls, addr: str, timeout: float = DEFAULT_TIMEOUT, accept_timeout: float | None = None,
               ready: threading.Event | None = None) -> "TcpTransport":
        """Accept exactly one peer on ``host:port``."""
        host, port = parse_address(addr)
        try:
            server = socket.create_server((host, port), reuse_port=False)
        except OSError as exc:
            raise TransportError(f"cannot listen on {addr}: {exc}") from None
        with server:
            server.settimeout(timeout if accept_timeout is None else accept_timeout)
            if ready is not None:
                ready.set()
            try:
                sock, peer = server.accept()
            except OSError as exc:
                raise TransportError(f"no peer connected to {addr}: {exc}") from None
        log.debug("accepted connection from %s", peer)
        return cls(sock, timeout)

    def send(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from None

    def recv_exactly(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(min(n - len(buf), 1 << 20))
            except socket.timeout:
                raise TransportError(f"timed out after {self.timeout:g}s waiting for data") from None
            except OSError as exc:
                raise TransportError(f"receive failed: {exc}") from None
            if not chunk:
                raise TransportError("peer closed the connection")
            buf += chunk
        return bytes(buf)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def tcp_transport(addr: str, listen: bool, timeout: float = DEFAULT_TIMEOUT) -> TcpTransport:
    if listen:
        return TcpTransport.listen(addr, timeout)
    return TcpTransport.connect(addr, timeout, retry_for=timeout)


class CapturingTransport(Transport):
    """Wraps a transport and records every frame it sends and receives."""

    def __init__(self, inner: Transport):
        self.inner = inner
        self.timeout = inner.timeout
        self.sent: list[bytes] = []
        self.received: list[bytes] = []

    def send(self, data: bytes) -> None:
        self.sent.append(bytes(data))
        self.inner.send(data)

    def recv_exactly(self, n: int) -> bytes:
        return self.inner.recv_exactly(n)

    def recv_message(self) -> wire.Message:
        header = self.inner.recv_exactly(wire.HEADER_SIZE)
        length, msg_type = wire.decode_header(header)
        payload = self.inner.recv_exactly(length)
        self.received.append(header + payload)
        return wire.decode_payload(msg_type, payload)

    def close(self) -> None:
        self.inner.close()
