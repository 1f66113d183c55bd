"""Request/response transports carrying encoded envelopes.

Over TCP each envelope travels in a length-prefixed frame (4-byte
little-endian length, then the envelope bytes).  The in-memory transport
hands the identical envelope byte strings straight to a server instance
and records the full trace, so protocol tests run unchanged over either.
"""

from __future__ import annotations

import socket
import ssl
import struct
import time

from .errors import ConnectionLost

_LEN = struct.Struct("<I")
MAX_FRAME = 1 << 30


def send_frame(sock, data: bytes) -> None:
    try:
        sock.sendall(_LEN.pack(len(data)) + data)
    except OSError as exc:
        raise ConnectionLost(str(exc)) from exc


def recv_frame(sock) -> bytes | None:
    """Read one frame; None on clean EOF at a frame boundary."""
    header = _recv_exact(sock, 4, allow_eof=True)
    if header is None:
        return None
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise ConnectionLost(f"frame of {length} bytes exceeds limit")
    return _recv_exact(sock, length, allow_eof=False)


def _recv_exact(sock, n: int, allow_eof: bool) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
        try:
            chunk = sock.recv(n - got)
        except OSError as exc:
            raise ConnectionLost(str(exc)) from exc
        if not chunk:
            if allow_eof and got == 0:
                return None
            raise ConnectionLost(f"peer closed mid-frame ({got}/{n} bytes)")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


class TcpTransport:
    """Blocking request/response client channel, optionally TLS-wrapped."""

    def __init__(
        self,
        host: str,
        port: int,
        use_tls: bool = False,
        cafile: str | None = None,
        timeout: float = 30.0,
    ):
        self.host = host
        self.port = port
        self.use_tls = use_tls
        self.cafile = cafile
        self.timeout = timeout
        self._sock = None
        self.connect()

    def connect(self) -> None:
        self.close()
        try:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except OSError as exc:
            raise ConnectionLost(str(exc)) from exc
        if self.use_tls:
            if self.cafile:
                ctx = ssl.create_default_context(cafile=self.cafile)
                ctx.check_hostname = False
            else:
                # Desk-scale default: encrypt without verifying the
                # self-signed certificate.
                ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
                ctx.check_hostname = False
                ctx.verify_mode = ssl.CERT_NONE
            sock = ctx.wrap_socket(sock)
        self._sock = sock

    def reconnect(self) -> None:
        self.connect()

    def send(self, data: bytes) -> bytes:
        if self._sock is None:
            raise ConnectionLost("transport not connected")
        send_frame(self._sock, data)
        reply = recv_frame(self._sock)
        if reply is None:
            raise ConnectionLost("server closed the connection")
        return reply

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None


class InMemoryTransport:
    """Synchronous transport to an in-process server; records every
    envelope byte string in .trace as ("c2s"|"s2c", bytes) pairs."""

    def __init__(self, server):
        self.server = server
        self.trace: list[tuple[str, bytes]] = []

    def send(self, data: bytes) -> bytes:
        self.trace.append(("c2s", data))
        reply = self.server.handle_frame(data)
        self.trace.append(("s2c", reply))
        return reply

    def close(self) -> None:
        pass


def send_with_retry(transport, data: bytes, max_attempts: int = 5, base_delay: float = 0.2):
    """Send through a transport, reconnecting with exponential backoff on
    connection loss; gives up (re-raising) after max_attempts."""
    last_exc = None
    for attempt in range(max_attempts):
        try:
            return transport.send(data)
        except ConnectionLost as exc:
            last_exc = exc
            if attempt == max_attempts - 1:
                break
            time.sleep(base_delay * (2.0 ** attempt))
            reconnect = getattr(transport, "reconnect", None)
            if reconnect is not None:
                try:
                    reconnect()
                except ConnectionLost as exc2:
                    last_exc = exc2
    raise ConnectionLost(f"gave up after {max_attempts} attempts: {last_exc}")
