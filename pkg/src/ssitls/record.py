"""TLS record layer: plaintext records for the Hello flight, AEAD-protected
records for everything after ServerHello, and alert framing."""

from __future__ import annotations

import enum
import socket
import struct

from .crypto import CipherSuite, aead, traffic_keys

MAX_FRAGMENT = 1 << 14
_HEADER = struct.Struct("!BHH")


class ContentType(enum.IntEnum):
    ALERT = 21
    HANDSHAKE = 22
    APPLICATION_DATA = 23


class AlertDescription(enum.IntEnum):
    CLOSE_NOTIFY = 0
    UNEXPECTED_MESSAGE = 10
    BAD_RECORD_MAC = 20
    HANDSHAKE_FAILURE = 40
    BAD_CERTIFICATE = 42
    CERTIFICATE_REVOKED = 44
    CERTIFICATE_EXPIRED = 45
    ILLEGAL_PARAMETER = 47
    DECODE_ERROR = 50
    DECRYPT_ERROR = 51
    INTERNAL_ERROR = 80


class TransportClosed(Exception):
    pass


class RecordError(Exception):
    """Record framing or AEAD failure; fatal to the connection."""


class PeerAlert(Exception):
    def __init__(self, description: int):
        try:
            name = AlertDescription(description).name.lower()
        except ValueError:
            name = str(description)
        super().__init__(f"peer sent fatal alert: {name}")
        self.description = description


def connect_tcp(host: str, port: int, timeout: float | None = 10.0) -> socket.socket:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return sock


def memory_pipe() -> tuple[socket.socket, socket.socket]:
    """In-memory duplex byte stream for tests (a socketpair)."""
    return socket.socketpair()


class _DirectionState:
    __slots__ = ("cipher", "key", "iv", "seq")

    def __init__(self, cipher: CipherSuite, secret: bytes):
        self.cipher = cipher
        self.key, self.iv = traffic_keys(cipher, secret)
        self.seq = 0

    def nonce(self) -> bytes:
        n = int.from_bytes(self.iv, "big") ^ self.seq
        return n.to_bytes(len(self.iv), "big")


class RecordLayer:
    """One connection's record framing over an ordered byte stream.

    `transport` needs sendall(bytes) and recv(n). Either direction starts
    unprotected and is upgraded independently as traffic secrets become
    available.
    """

    def __init__(self, transport):
        self.transport = transport
        self._write: _DirectionState | None = None
        self._read: _DirectionState | None = None

    def protect_writes(self, cipher: CipherSuite, secret: bytes) -> None:
        self._write = _DirectionState(cipher, secret)

    def protect_reads(self, cipher: CipherSuite, secret: bytes) -> None:
        self._read = _DirectionState(cipher, secret)

    @property
    def writes_protected(self) -> bool:
        return self._write is not None

    # -- sending ------------------------------------------------------------

    def send(self, content_type: int, payload: bytes) -> None:
        for start in range(0, len(payload), MAX_FRAGMENT) or [0]:
            self._send_one(content_type, payload[start:start + MAX_FRAGMENT])

    def _send_one(self, content_type: int, fragment: bytes) -> None:
        if self._write is None:
            header = _HEADER.pack(content_type, 0x0303, len(fragment))
            self.transport.sendall(header + fragment)
            return
        inner = fragment + bytes([content_type])
        header = _HEADER.pack(int(ContentType.APPLICATION_DATA), 0x0303, len(inner) + 16)
        ct = aead(self._write.cipher, self._write.key).encrypt(
            self._write.nonce(), inner, header)
        self._write.seq += 1
        self.transport.sendall(header + ct)

    def send_alert(self, description: int, level: int = 2) -> None:
        try:
            self.send(ContentType.ALERT, bytes([level, description]))
        except Exception:
            pass  # peer may already be gone; the alert is best effort

    # -- receiving ----------------------------------------------------------

    def _read_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self.transport.recv(n - len(buf))
            if not chunk:
                raise TransportClosed("connection closed mid-record")
            buf += chunk
        return buf

    def recv(self) -> tuple[int, bytes]:
        """Next record as (content type, plaintext). Alerts are returned,
        not raised; callers decide severity."""
        header = self._read_exact(5)
        content_type, version, length = _HEADER.unpack(header)
        if version != 0x0303:
            raise RecordError(f"bad record version 0x{version:04x}")
        if length > MAX_FRAGMENT + 256:
            raise RecordError(f"oversized record ({length} bytes)")
        body = self._read_exact(length)
        if self._read is None:
            if content_type not in (ContentType.ALERT, ContentType.HANDSHAKE):
                raise RecordError(f"unexpected plaintext record type {content_type}")
            return content_type, body
        if content_type != ContentType.APPLICATION_DATA:
            if content_type == ContentType.ALERT:
                return content_type, body  # peer may alert in the clear
            raise RecordError(f"unprotected record type {content_type} after key change")
        try:
            inner = aead(self._read.cipher, self._read.key).decrypt(
                self._read.nonce(), body, header)
        except Exception as exc:
            raise RecordError("record authentication failed") from exc
        self._read.seq += 1
        stripped = inner.rstrip(b"\x00")
        if not stripped:
            raise RecordError("record with no content type")
        return stripped[-1], stripped[:-1]

    def close(self) -> None:
        try:
            self.transport.close()
        except OSError:
            pass


class MessageStream:
    """Demultiplexes records into handshake messages and application data."""

    def __init__(self, records: RecordLayer):
        self.records = records
        self._handshake_buf = b""
        self._app_buf: list[bytes] = []

    def next_handshake_raw(self) -> bytes:
        """Raw bytes of the next complete handshake message."""
        from .messages import DecodeError

        while True:
            if len(self._handshake_buf) >= 4:
                body_len = int.from_bytes(self._handshake_buf[1:4], "big")
                if body_len > MAX_FRAGMENT * 4:
                    raise DecodeError("handshake message implausibly large", kind="length")
                if len(self._handshake_buf) >= 4 + body_len:
                    raw = self._handshake_buf[:4 + body_len]
                    self._handshake_buf = self._handshake_buf[4 + body_len:]
                    return raw
            ctype, payload = self.records.recv()
            if ctype == ContentType.HANDSHAKE:
                self._handshake_buf += payload
            elif ctype == ContentType.ALERT:
                raise PeerAlert(payload[1] if len(payload) >= 2 else 0)
            elif ctype == ContentType.APPLICATION_DATA:
                self._app_buf.append(payload)
            else:
                raise RecordError(f"unexpected record type {ctype}")

    def next_app_data(self) -> bytes:
        if self._app_buf:
            return self._app_buf.pop(0)
        while True:
            ctype, payload = self.records.recv()
            if ctype == ContentType.APPLICATION_DATA:
                return payload
            if ctype == ContentType.ALERT:
                if len(payload) >= 2 and payload[1] == AlertDescription.CLOSE_NOTIFY:
                    raise TransportClosed("peer closed the session")
                raise PeerAlert(payload[1] if len(payload) >= 2 else 0)
            raise RecordError(f"unexpected record type {ctype} after handshake")
