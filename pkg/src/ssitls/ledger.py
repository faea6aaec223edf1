"""In-repo distributed-ledger stand-in: an append-only DID document store
served over TCP, plus the resolver client.

The store is the root of trust for identity public keys. Resolvers normally
reach it over an X.509-authenticated original handshake; a loudly named
plaintext mode exists so the resolution man-in-the-middle attack can be
demonstrated against it.

Wire protocol (both channel modes): 4-byte big-endian length, then a
canonical-JSON body. Requests are {"op": "get"|"put", ...}.
"""

from __future__ import annotations

import hashlib
import json
import logging
import socket
import threading
from dataclasses import dataclass, replace
from pathlib import Path

from . import handshake
from .certs import X509Identity
from .crypto import KeyPair, SignatureSuite, verify
from .identity import (
    Did,
    DidDocument,
    DidNotFound,
    DidResolutionError,
    canonical_json,
    genesis_bytes,
)
from .record import PeerAlert, RecordError, TransportClosed

logger = logging.getLogger(__name__)

MAX_FRAME = 1 << 20


class LedgerError(Exception):
    pass


class LedgerRejected(LedgerError):
    """Record violates append-only continuity rules."""


class LedgerCorruption(LedgerError):
    """Store log failed to replay; the node refuses to start."""


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LedgerRecord:
    """One append-only entry for a method-specific-id.

    Sequence 0 is self-signed by the key inside its own document and its id
    must equal the document's content address. Every later record is signed
    by the key of the record before it; a tombstone is terminal.
    """

    method_specific_id: str
    sequence: int
    payload: dict
    author_signature: bytes = b""

    @classmethod
    def document_record(cls, msid: str, sequence: int, document: dict) -> "LedgerRecord":
        return cls(msid, sequence, {"document": document})

    @classmethod
    def tombstone_record(cls, msid: str, sequence: int) -> "LedgerRecord":
        return cls(msid, sequence, {"tombstone": True})

    @property
    def is_tombstone(self) -> bool:
        return bool(self.payload.get("tombstone"))

    @property
    def document(self) -> dict:
        return self.payload["document"]

    def signing_bytes(self) -> bytes:
        return canonical_json({"id": self.method_specific_id,
                               "seq": self.sequence,
                               "payload": self.payload})

    def signed(self, keys: KeyPair) -> "LedgerRecord":
        from .crypto import sign
        return replace(self, author_signature=sign(keys.suite, keys.secret_key,
                                                   self.signing_bytes()))

    def to_json_dict(self) -> dict:
        return {"id": self.method_specific_id, "seq": self.sequence,
                "payload": self.payload, "sig": self.author_signature.hex()}

    @classmethod
    def from_json_dict(cls, data: dict) -> "LedgerRecord":
        try:
            return cls(data["id"], int(data["seq"]), data["payload"],
                       bytes.fromhex(data["sig"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise LedgerError(f"malformed record: {exc}") from exc


def _signer_key(document: dict) -> tuple[SignatureSuite, bytes]:
    doc = DidDocument.from_json_dict(document)
    return doc.authentication_key()


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------

class LedgerStore:
    """Append-only log with an in-memory index. `path=None` keeps the log
    purely in memory; otherwise the log file is replayed on start and every
    accepted record is appended to it.

    The store itself satisfies the resolver-client interface (get/put), so
    tests can resolve directly against it without a network hop.
    """

    def __init__(self, path: str | Path | None = None):
        self._records: dict[str, list[LedgerRecord]] = {}
        self._lock = threading.RLock()
        self._path = Path(path) if path is not None else None
        self._log_fh = None
        if self._path is not None:
            if self._path.exists():
                self._replay()
            self._log_fh = open(self._path, "ab")

    def _replay(self) -> None:
        data = self._path.read_bytes()
        offset = 0
        while offset < len(data):
            if offset + 4 > len(data):
                raise LedgerCorruption("truncated length prefix")
            length = int.from_bytes(data[offset:offset + 4], "big")
            offset += 4
            if offset + length > len(data):
                raise LedgerCorruption("truncated record")
            try:
                obj = json.loads(data[offset:offset + length])
                record = LedgerRecord.from_json_dict(obj)
                self._validate_and_index(record)
            except (LedgerError, ValueError) as exc:
                raise LedgerCorruption(f"log replay failed: {exc}") from exc
            offset += length

    def _validate_and_index(self, record: LedgerRecord) -> None:
        shape_ok = (set(record.payload.keys()) == {"document"}
                    or record.payload == {"tombstone": True})
        if not shape_ok:
            raise LedgerRejected("payload must be a document or a tombstone")
        existing = self._records.get(record.method_specific_id, [])
        if existing:
            last = existing[-1]
            if last.is_tombstone:
                raise LedgerRejected("id is tombstoned")
            if record.sequence != last.sequence + 1:
                raise LedgerRejected(
                    f"expected sequence {last.sequence + 1}, got {record.sequence}")
            signer = last.document
        else:
            if record.sequence != 0:
                raise LedgerRejected(f"first record must have sequence 0,"
                                     f" got {record.sequence}")
            if record.is_tombstone:
                raise LedgerRejected("tombstone cannot open a sequence")
            signer = record.document
            doc = DidDocument.from_json_dict(signer)
            address = hashlib.sha256(genesis_bytes(doc)).hexdigest()
            if address != record.method_specific_id:
                raise LedgerRejected("id is not the document's content address")
            if doc.id.method_specific_id != record.method_specific_id:
                raise LedgerRejected("document id does not match the record id")
        try:
            suite, public_key = _signer_key(signer)
        except Exception as exc:
            raise LedgerRejected(f"cannot extract the controlling key: {exc}") from exc
        if not verify(suite, public_key, record.signing_bytes(), record.author_signature):
            raise LedgerRejected("record is not signed by the controlling key")
        self._records.setdefault(record.method_specific_id, []).append(record)

    # -- client-facing operations -------------------------------------------

    def put(self, record: LedgerRecord) -> None:
        with self._lock:
            self._validate_and_index(record)
            if self._log_fh is not None:
                body = canonical_json(record.to_json_dict())
                self._log_fh.write(len(body).to_bytes(4, "big") + body)
                self._log_fh.flush()

    def get(self, method_specific_id: str) -> LedgerRecord:
        with self._lock:
            records = self._records.get(method_specific_id)
            if not records:
                raise DidNotFound(method_specific_id)
            return records[-1]

    def records(self, method_specific_id: str) -> tuple[LedgerRecord, ...]:
        with self._lock:
            return tuple(self._records.get(method_specific_id, ()))

    def ids(self) -> tuple[str, ...]:
        with self._lock:
            return tuple(self._records.keys())

    def close(self) -> None:
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = None


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------

class FrameIO:
    """Length-prefixed canonical-JSON frames over any chunked byte channel."""

    def __init__(self, send_bytes, recv_chunk):
        self._send = send_bytes
        self._recv = recv_chunk
        self._buf = b""

    def send_frame(self, obj: dict) -> None:
        body = canonical_json(obj)
        if len(body) > MAX_FRAME:
            raise LedgerError("frame too large")
        self._send(len(body).to_bytes(4, "big") + body)

    def recv_frame(self) -> dict | None:
        while True:
            if len(self._buf) >= 4:
                length = int.from_bytes(self._buf[:4], "big")
                if length > MAX_FRAME:
                    raise LedgerError("oversized frame")
                if len(self._buf) >= 4 + length:
                    body = self._buf[4:4 + length]
                    self._buf = self._buf[4 + length:]
                    try:
                        obj = json.loads(body)
                    except ValueError as exc:
                        raise LedgerError(f"frame is not JSON: {exc}") from exc
                    if not isinstance(obj, dict):
                        raise LedgerError("frame must be a JSON object")
                    return obj
            try:
                chunk = self._recv()
            except (TransportClosed, OSError):
                chunk = b""
            if not chunk:
                if self._buf:
                    raise LedgerError("connection closed mid-frame")
                return None
            self._buf += chunk


def socket_frames(sock: socket.socket) -> FrameIO:
    return FrameIO(sock.sendall, lambda: sock.recv(65536))


def session_frames(session: handshake.SecureSession) -> FrameIO:
    return FrameIO(session.send, session.recv)


# ---------------------------------------------------------------------------
# Node (server)
# ---------------------------------------------------------------------------

class LedgerNode:
    """Single ledger node. Authenticated mode fronts every session with an
    X.509 original handshake; `insecure_plaintext=True` serves raw frames
    for attack demonstrations only."""

    def __init__(self, store: LedgerStore,
                 x509_identity: X509Identity | None = None,
                 host: str = "127.0.0.1", port: int = 0,
                 insecure_plaintext: bool = False,
                 conn_timeout: float = 30.0):
        if not insecure_plaintext and x509_identity is None:
            raise LedgerError("authenticated mode needs an X.509 identity")
        self.store = store
        self.insecure_plaintext = insecure_plaintext
        self._identity = x509_identity
        self._conn_timeout = conn_timeout
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(128)
        self._listener.settimeout(0.2)
        self.address = self._listener.getsockname()
        self._stop = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        if insecure_plaintext:
            logger.warning("ledger node %s:%d serving PLAINTEXT frames;"
                           " resolution is forgeable in transit", *self.address)

    def __enter__(self) -> "LedgerNode":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def start(self) -> "LedgerNode":
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._accept_thread.join(timeout=5)
        self._listener.close()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(self._conn_timeout)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._serve_one, args=(conn,), daemon=True).start()

    def _serve_one(self, conn: socket.socket) -> None:
        try:
            if self.insecure_plaintext:
                frames = socket_frames(conn)
            else:
                config = handshake.EndpointConfig(x509_identity=self._identity)
                outcome = handshake.run_server(config, conn)
                frames = session_frames(outcome.session)
            while True:
                request = frames.recv_frame()
                if request is None:
                    return
                frames.send_frame(self._handle(request))
        except (handshake.HandshakeAbort, PeerAlert, RecordError, TransportClosed,
                LedgerError, OSError) as exc:
            logger.debug("ledger session dropped: %s", exc)
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def _handle(self, request: dict) -> dict:
        op = request.get("op")
        if op == "get":
            try:
                record = self.store.get(str(request.get("id", "")))
            except DidNotFound:
                return {"ok": False, "error": "not-found"}
            return {"ok": True, "record": record.to_json_dict()}
        if op == "put":
            try:
                record = LedgerRecord.from_json_dict(request.get("record", {}))
                self.store.put(record)
            except (LedgerError, Exception) as exc:
                return {"ok": False, "error": f"rejected: {exc}"}
            return {"ok": True}
        return {"ok": False, "error": f"unknown op {op!r}"}


# ---------------------------------------------------------------------------
# Resolver client
# ---------------------------------------------------------------------------

class LedgerClient:
    """Resolver-side access to a ledger node.

    Every request opens a fresh connection (and, in authenticated mode, a
    fresh original handshake): resolution cost deliberately includes the
    secure-channel setup, with no caching or resumption.
    """

    def __init__(self, host: str, port: int,
                 trust_anchor: bytes | None = None,
                 insecure_plaintext: bool = False,
                 timeout: float = 10.0):
        if not insecure_plaintext and trust_anchor is None:
            raise LedgerError("authenticated mode needs the node's root certificate")
        self.host, self.port = host, port
        self.trust_anchor = trust_anchor
        self.insecure_plaintext = insecure_plaintext
        self.timeout = timeout

    def get(self, method_specific_id: str) -> LedgerRecord:
        response = self._request({"op": "get", "id": method_specific_id})
        if not response.get("ok"):
            if response.get("error") == "not-found":
                raise DidNotFound(method_specific_id)
            raise DidResolutionError(response.get("error", "resolution failed"))
        try:
            return LedgerRecord.from_json_dict(response["record"])
        except (KeyError, LedgerError) as exc:
            raise DidResolutionError(f"malformed node response: {exc}") from exc

    def put(self, record: LedgerRecord) -> None:
        response = self._request({"op": "put", "record": record.to_json_dict()})
        if not response.get("ok"):
            raise LedgerRejected(response.get("error", "rejected"))

    def _request(self, request: dict) -> dict:
        try:
            sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
        except OSError as exc:
            raise DidResolutionError(f"cannot reach ledger node: {exc}") from exc
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            if self.insecure_plaintext:
                frames = socket_frames(sock)
            else:
                config = handshake.EndpointConfig(
                    preferred_mode=handshake.Mode.X509,
                    x509_roots=(self.trust_anchor,))
                try:
                    outcome = handshake.run_client(config, sock)
                except (handshake.HandshakeAbort, PeerAlert, RecordError,
                        TransportClosed) as exc:
                    raise DidResolutionError(
                        f"ledger channel authentication failed: {exc}") from exc
                frames = session_frames(outcome.session)
            frames.send_frame(request)
            response = frames.recv_frame()
            if response is None:
                raise DidResolutionError("ledger node closed the connection")
            return response
        except LedgerError as exc:
            raise DidResolutionError(str(exc)) from exc
        except OSError as exc:
            raise DidResolutionError(f"ledger transport failure: {exc}") from exc
        finally:
            try:
                sock.close()
            except OSError:
                pass
