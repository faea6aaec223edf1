"""Client and server handshake state machines.

Five authentication configurations are supported: the original X.509
handshake, the two SSI modes (verifiable credential and bare DID), and the
two hybrid flavours (X.509 on exactly one side). A server may also fall
back to the original handshake when it cannot satisfy the client's SSI
proposal. Post-ServerHello flights are AEAD protected by the record layer.
"""

from __future__ import annotations

import datetime
import enum
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import certs, identity, messages
from .crypto import (
    CipherSuite,
    KeySchedule,
    MANDATORY_CIPHER_SUITE,
    Rng,
    SYSTEM_RNG,
    SessionKeys,
    SignatureSuite,
    build_signed_content,
    ecdhe_exchange,
    finished_mac,
    generate_x25519,
    sign,
    verify,
)
from .messages import (
    AuthnMode,
    Certificate,
    CertificateRequest,
    CertificateVerify,
    ClientHello,
    DecodeError,
    DidMessage,
    DidVerify,
    EncryptedExtensions,
    ExtensionBlock,
    ExtensionType,
    Finished,
    GROUP_X25519,
    HandshakeTranscript,
    HandshakeType,
    ServerHello,
    SsiParameters,
    SsiRequest,
    VcMessage,
    encode,
    encode_key_share_client,
    encode_key_share_server,
    encode_signature_algorithms,
    decode_key_share_client,
    decode_key_share_server,
    decode_signature_algorithms,
)
from .record import (
    AlertDescription,
    ContentType,
    MessageStream,
    PeerAlert,
    RecordError,
    RecordLayer,
    TransportClosed,
)

logger = logging.getLogger(__name__)


class Mode(enum.Enum):
    """Client authentication-mode preference for the peer."""

    X509 = "x509"
    VC = "vc"
    DID = "did"
    VC_PEER_X509 = "vc-peer-x509"  # holds an SSI identity, wants X.509 from peer


class Flow(enum.Enum):
    ORIGINAL = "original"
    SSI_VC = "ssi-vc"
    SSI_DID = "ssi-did"
    HYBRID_CLIENT_X509 = "hybrid-client-x509"  # client X.509, server SSI
    HYBRID_SERVER_X509 = "hybrid-server-x509"  # client SSI, server X.509
    FALLBACK = "fallback"


# ---------------------------------------------------------------------------
# Failures. `kind` is the stable programmatic name; `alert` the wire code.
# ---------------------------------------------------------------------------

class HandshakeAbort(Exception):
    kind = "internal_error"
    alert = AlertDescription.INTERNAL_ERROR

    def __init__(self, detail: str = ""):
        super().__init__(f"{self.kind}" + (f": {detail}" if detail else ""))
        self.detail = detail


class NegotiationMismatch(HandshakeAbort):
    kind = "negotiation_mismatch"
    alert = AlertDescription.HANDSHAKE_FAILURE


class BadIdentity(HandshakeAbort):
    kind = "bad_identity"
    alert = AlertDescription.BAD_CERTIFICATE


class RevokedIdentity(HandshakeAbort):
    kind = "revoked_identity"
    alert = AlertDescription.CERTIFICATE_REVOKED


class BadSignature(HandshakeAbort):
    kind = "bad_signature"
    alert = AlertDescription.DECRYPT_ERROR


class FinishedMismatch(HandshakeAbort):
    kind = "finished_mismatch"
    alert = AlertDescription.DECRYPT_ERROR


class ResolutionFailure(HandshakeAbort):
    kind = "resolution_failure"
    alert = AlertDescription.INTERNAL_ERROR


class UnexpectedMessage(HandshakeAbort):
    kind = "unexpected_message"
    alert = AlertDescription.UNEXPECTED_MESSAGE


class DecodeAbort(HandshakeAbort):
    kind = "decode_error"
    alert = AlertDescription.DECODE_ERROR


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# Endpoint configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SsiIdentity:
    did: identity.Did
    keys: "identity.KeyPair"
    vc: identity.VerifiableCredential | None = None


@dataclass
class EndpointConfig:
    preferred_mode: Mode = Mode.X509
    x509_identity: certs.X509Identity | None = None
    ssi_identity: SsiIdentity | None = None
    supported_methods: tuple[int, ...] = ()
    trust_store: identity.TrustStore = field(default_factory=identity.TrustStore)
    x509_roots: tuple[bytes, ...] = ()
    ledger: object | None = None
    signature_algorithms: tuple[SignatureSuite, ...] = tuple(SignatureSuite)
    cipher_suite: CipherSuite = MANDATORY_CIPHER_SUITE
    request_client_auth: bool = False
    client_auth_mode: str = "ssi"  # "ssi" follows the client's mode; or "x509"
    ssi_request_mode: AuthnMode = AuthnMode.VC  # mode asked of a mode-less SSI client
    rng: Rng = SYSTEM_RNG
    tamper: Optional[Callable[[int, bytes], bytes]] = None

    def validate(self, role: str) -> None:
        if self.preferred_mode in (Mode.VC, Mode.DID, Mode.VC_PEER_X509) and role == "client":
            if self.ssi_identity is None:
                raise ConfigError(f"{self.preferred_mode.value} requires an SSI identity")
            if self.ssi_identity.did.method.code not in self.supported_methods:
                raise ConfigError("own DID method must be among the supported methods")
            if self.ledger is None:
                raise ConfigError("SSI modes require a ledger client")
        if self.preferred_mode in (Mode.VC, Mode.VC_PEER_X509) and role == "client":
            vc = self.ssi_identity.vc
            if vc is None:
                raise ConfigError("VC mode requires a credential")
            if vc.subject_id != self.ssi_identity.did:
                raise ConfigError("credential subject must match the DID")
        if role == "server":
            if self.x509_identity is None and self.ssi_identity is None:
                raise ConfigError("server needs an X.509 or SSI identity")
            if self.request_client_auth and self.client_auth_mode == "ssi" and self.ledger is None:
                raise ConfigError("verifying SSI client auth requires a ledger client")


@dataclass(frozen=True)
class PeerIdentity:
    kind: str  # "x509" | "did" | "anonymous"
    x509_subject: str | None = None
    did: identity.Did | None = None
    claims: dict = field(default_factory=dict)

    @classmethod
    def anonymous(cls) -> "PeerIdentity":
        return cls(kind="anonymous")


@dataclass
class HandshakeOutcome:
    flow: Flow
    keys: SessionKeys
    peer: PeerIdentity
    transcript: HandshakeTranscript
    cipher: CipherSuite
    timers: dict[str, float]
    session: "SecureSession"

    def accounting(self, role: str) -> messages.BytesAccounting:
        return messages.transcript_bytes_accounting(self.transcript, role)


class SecureSession:
    """Application-data channel once the handshake has completed."""

    def __init__(self, records: RecordLayer, stream: MessageStream):
        self._records = records
        self._stream = stream

    def send(self, data: bytes) -> None:
        self._records.send(ContentType.APPLICATION_DATA, data)

    def recv(self) -> bytes:
        return self._stream.next_app_data()

    def close(self) -> None:
        self._records.send_alert(AlertDescription.CLOSE_NOTIFY, level=1)
        self._records.close()


# ---------------------------------------------------------------------------
# Server mode negotiation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ServerDecision:
    server_auth: str             # "x509" | "vc" | "did"
    client_auth: str | None      # None | "x509" | "vc" | "did"
    ssi_request_methods: tuple[int, ...]
    flow: Flow


def negotiate_server_mode(params: SsiParameters | None,
                          config: EndpointConfig) -> ServerDecision:
    """Total decision function from the ClientHello signal and local config."""
    has_x509 = config.x509_identity is not None
    ssi = config.ssi_identity
    x509_client_auth = "x509" if config.request_client_auth else None

    if params is None:
        if not has_x509:
            raise NegotiationMismatch("no X.509 identity for an original handshake")
        return ServerDecision("x509", x509_client_auth, (), Flow.ORIGINAL)

    if params.mode is AuthnMode.UNSPECIFIED:
        # peer holds an SSI identity but insists on X.509 from us
        if not has_x509:
            raise NegotiationMismatch("client requires X.509 server authentication")
        if (config.request_client_auth and config.client_auth_mode == "ssi"
                and config.ledger is not None and config.supported_methods):
            mode = "vc" if config.ssi_request_mode is AuthnMode.VC else "did"
            return ServerDecision("x509", mode, tuple(config.supported_methods),
                                  Flow.HYBRID_SERVER_X509)
        return ServerDecision("x509", x509_client_auth, (), Flow.ORIGINAL)

    wanted = "vc" if params.mode is AuthnMode.VC else "did"
    capable = (ssi is not None
               and ssi.did.method.code in params.did_methods
               and (wanted == "did" or ssi.vc is not None))
    if not capable:
        if not has_x509:
            raise NegotiationMismatch("cannot satisfy the proposed SSI mode")
        return ServerDecision("x509", x509_client_auth, (), Flow.FALLBACK)

    flow = Flow.SSI_VC if wanted == "vc" else Flow.SSI_DID
    if not config.request_client_auth:
        return ServerDecision(wanted, None, (), flow)
    if config.client_auth_mode == "x509":
        return ServerDecision(wanted, "x509", (), Flow.HYBRID_CLIENT_X509)
    # mutual SSI keeps the client's mode; methods are the common set
    common = tuple(m for m in config.supported_methods if m in params.did_methods)
    return ServerDecision(wanted, wanted, common, flow)


# ---------------------------------------------------------------------------
# Shared endpoint machinery
# ---------------------------------------------------------------------------

class _Timers(dict):
    def add(self, name: str, seconds: float) -> None:
        self[name] = self.get(name, 0.0) + seconds


class _timed:
    def __init__(self, timers: _Timers, name: str):
        self.timers, self.name = timers, name

    def __enter__(self):
        self.start = time.perf_counter()

    def __exit__(self, *exc):
        self.timers.add(self.name, time.perf_counter() - self.start)


class _Endpoint:
    role: str
    peer_role: str

    def __init__(self, config: EndpointConfig, transport):
        self.config = config
        self.records = RecordLayer(transport)
        self.stream = MessageStream(self.records)
        self.transcript = HandshakeTranscript()
        self.cipher = config.cipher_suite
        self.timers = _Timers()

    # -- plumbing -----------------------------------------------------------

    def send_msg(self, msg) -> bytes:
        raw = encode(msg)
        if self.config.tamper is not None:
            raw = self.config.tamper(int(msg.msg_type), raw)
        self.transcript.append(self.role, raw)
        self.records.send(ContentType.HANDSHAKE, raw)
        return raw

    def recv_msg(self, *expected: HandshakeType):
        try:
            raw = self.stream.next_handshake_raw()
        except DecodeError as exc:
            self.abort(DecodeAbort(str(exc)))
        if raw[0] not in expected:
            got = (HandshakeType(raw[0]).name
                   if raw[0] in HandshakeType._value2member_map_ else str(raw[0]))
            want = "/".join(t.name for t in expected)
            self.abort(UnexpectedMessage(f"got {got}, expected {want}"))
        self.transcript.append(self.peer_role, raw)
        try:
            return messages.decode(raw)
        except DecodeError as exc:
            self.abort(DecodeAbort(str(exc)))

    def abort(self, exc: HandshakeAbort) -> None:
        self.records.send_alert(exc.alert)
        raise exc

    def transcript_hash(self) -> bytes:
        return self.transcript.hash(self.cipher)

    # -- signatures over the transcript --------------------------------------

    def make_verify_message(self, purpose: str, keys: "identity.KeyPair"):
        content = build_signed_content(self.role, purpose, self.transcript_hash())
        with _timed(self.timers, "sign"):
            signature = sign(keys.suite, keys.secret_key, content)
        cls = DidVerify if purpose == "did_verify" else CertificateVerify
        return cls(keys.suite.scheme_code, signature)

    def check_verify_message(self, msg, purpose: str, suite: SignatureSuite,
                             public_key: bytes, th_before: bytes) -> None:
        try:
            claimed = SignatureSuite.from_scheme_code(msg.scheme)
        except Exception:
            self.abort(BadSignature(f"unknown signature scheme 0x{msg.scheme:04x}"))
        if claimed is not suite:
            self.abort(BadSignature("signature scheme does not match the peer key"))
        if claimed not in self.config.signature_algorithms:
            self.abort(BadSignature("signature scheme was not offered"))
        content = build_signed_content(self.peer_role, purpose, th_before)
        if not verify(suite, public_key, content, msg.signature):
            self.abort(BadSignature(f"{purpose} verification failed"))

    # -- peer identity processing --------------------------------------------

    def process_certificate(self, msg: Certificate) -> tuple[SignatureSuite, bytes, PeerIdentity]:
        try:
            with _timed(self.timers, "chain_verify"):
                leaf = certs.verify_chain(msg.chain, list(self.config.x509_roots))
                suite = certs.leaf_suite(msg.chain[0])
                public_key = certs.leaf_public_key_bytes(msg.chain[0])
        except certs.CertificateError as exc:
            self.abort(BadIdentity(str(exc)))
        peer = PeerIdentity(kind="x509", x509_subject=leaf.subject.rfc4514_string())
        return suite, public_key, peer

    def process_vc_message(self, msg: VcMessage,
                           acceptable_methods: tuple[int, ...]) -> tuple[SignatureSuite, bytes, PeerIdentity]:
        try:
            with _timed(self.timers, "vc_verify"):
                vc = identity.vc_deserialize(msg.vc)
                subject = identity.vc_verify(
                    vc, self.config.trust_store,
                    datetime.datetime.now(datetime.timezone.utc))
        except identity.VcRejected as exc:
            self.abort(BadIdentity(exc.reason.value))
        except identity.IdentityError as exc:
            self.abort(BadIdentity(str(exc)))
        if subject.method.code not in acceptable_methods:
            self.abort(NegotiationMismatch(
                f"credential subject DID uses method {subject.method.code},"
                f" not one of the negotiated methods"))
        suite, public_key = self.resolve_peer_key(subject)
        peer = PeerIdentity(kind="did", did=subject, claims=dict(vc.claims))
        return suite, public_key, peer

    def process_did_message(self, msg: DidMessage,
                            acceptable_methods: tuple[int, ...]) -> tuple[SignatureSuite, bytes, PeerIdentity]:
        if msg.did_method not in acceptable_methods:
            self.abort(NegotiationMismatch(
                f"DID method {msg.did_method} was not negotiated"))
        try:
            did = identity.Did.parse(msg.did.decode("utf-8"))
        except (UnicodeDecodeError, identity.DidParseError) as exc:
            self.abort(BadIdentity(f"unparseable DID: {exc}"))
        if did.method.code != msg.did_method:
            self.abort(BadIdentity("DID method byte disagrees with the DID"))
        if not self.config.trust_store.is_trusted_did(did):
            self.abort(BadIdentity(f"{did.text} is not in the trusted-DID list"))
        suite, public_key = self.resolve_peer_key(did)
        peer = PeerIdentity(kind="did", did=did)
        return suite, public_key, peer

    def resolve_peer_key(self, did: identity.Did) -> tuple[SignatureSuite, bytes]:
        try:
            with _timed(self.timers, "resolve"):
                resolved = identity.did_resolve(self.config.ledger, did)
        except identity.DidResolutionError as exc:
            self.abort(ResolutionFailure(str(exc)))
        except identity.IdentityError as exc:
            self.abort(BadIdentity(f"resolved document unusable: {exc}"))
        if resolved is identity.REVOKED or isinstance(resolved, identity.Revoked):
            self.abort(RevokedIdentity(did.text))
        try:
            return resolved.authentication_key()
        except Exception as exc:
            self.abort(BadIdentity(f"resolved document unusable: {exc}"))

    # -- own identity flights -------------------------------------------------

    def send_x509_identity(self) -> None:
        ident = self.config.x509_identity
        if ident is None:
            self.abort(NegotiationMismatch(f"{self.role} lacks an X.509 identity"))
        self.send_msg(Certificate(b"", tuple((der, b"") for der in ident.chain)))
        self.send_msg(self.make_verify_message("certificate_verify", ident.keys))

    def send_ssi_identity(self, mode: str) -> None:
        ident = self.config.ssi_identity
        if ident is None or (mode == "vc" and ident.vc is None):
            self.abort(NegotiationMismatch(f"{self.role} lacks the {mode} identity"))
        if mode == "vc":
            self.send_msg(VcMessage(identity.vc_serialize(ident.vc)))
        else:
            self.send_msg(DidMessage(ident.did.method.code, ident.did.text.encode()))
        self.send_msg(self.make_verify_message("did_verify", ident.keys))

    def recv_peer_identity(self, kind: str, acceptable_methods: tuple[int, ...]) \
            -> tuple[SignatureSuite, bytes, PeerIdentity, str]:
        """Receive Certificate/VC/DID plus its Verify message; returns the
        verified peer. `kind` is "x509" | "vc" | "did"."""
        first = {"x509": HandshakeType.CERTIFICATE,
                 "vc": HandshakeType.VC,
                 "did": HandshakeType.DID}[kind]
        msg = self.recv_msg(first)
        if kind == "x509":
            suite, public_key, peer = self.process_certificate(msg)
            purpose = "certificate_verify"
            verify_type = HandshakeType.CERTIFICATE_VERIFY
        elif kind == "vc":
            suite, public_key, peer = self.process_vc_message(msg, acceptable_methods)
            purpose = "did_verify"
            verify_type = HandshakeType.DID_VERIFY
        else:
            suite, public_key, peer = self.process_did_message(msg, acceptable_methods)
            purpose = "did_verify"
            verify_type = HandshakeType.DID_VERIFY
        th_before = self.transcript_hash()
        verify_msg = self.recv_msg(verify_type)
        self.check_verify_message(verify_msg, purpose, suite, public_key, th_before)
        return suite, public_key, peer, purpose

    def check_finished(self, secret: bytes) -> None:
        th_before = self.transcript_hash()
        msg = self.recv_msg(HandshakeType.FINISHED)
        expected = finished_mac(self.cipher, secret, th_before)
        if not _constant_time_eq(expected, msg.verify_data):
            self.abort(FinishedMismatch())

    def send_finished(self, secret: bytes) -> None:
        mac = finished_mac(self.cipher, secret, self.transcript_hash())
        self.send_msg(Finished(mac))


def _constant_time_eq(a: bytes, b: bytes) -> bool:
    import hmac
    return hmac.compare_digest(a, b)


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------

class _Client(_Endpoint):
    role = "client"
    peer_role = "server"

    def run(self) -> HandshakeOutcome:
        config = self.config
        config.validate("client")
        rng = config.rng
        ephemeral = generate_x25519(rng)

        sent_params = self._proposed_parameters()
        extensions = [
            (int(ExtensionType.SUPPORTED_VERSIONS), b"\x02\x03\x04"),
            (int(ExtensionType.SUPPORTED_GROUPS),
             b"\x00\x02" + GROUP_X25519.to_bytes(2, "big")),
            (int(ExtensionType.SIGNATURE_ALGORITHMS),
             encode_signature_algorithms(config.signature_algorithms)),
            (int(ExtensionType.KEY_SHARE),
             encode_key_share_client([(GROUP_X25519, ephemeral.public_key)])),
        ]
        if sent_params is not None:
            extensions.append((int(ExtensionType.SSI_PARAMETERS), sent_params.encode()))
        hello = ClientHello(
            random=rng.bytes(32),
            session_id=rng.bytes(32),
            cipher_suites=(config.cipher_suite.code,),
            extensions=ExtensionBlock(tuple(extensions)),
        )
        self.send_msg(hello)

        sh = self.recv_msg(HandshakeType.SERVER_HELLO)
        if sh.cipher_suite != config.cipher_suite.code:
            self.abort(NegotiationMismatch(
                f"server chose unsupported cipher suite 0x{sh.cipher_suite:04x}"))
        share = sh.extensions.get(ExtensionType.KEY_SHARE)
        if share is None:
            self.abort(NegotiationMismatch("server offered no key share"))
        group, server_public = decode_key_share_server(share)
        if group != GROUP_X25519:
            self.abort(NegotiationMismatch(f"unsupported key-share group {group}"))
        shared = ecdhe_exchange(ephemeral, server_public)

        schedule = KeySchedule(self.cipher)
        schedule.inject_ecdhe(shared)
        c_hs, s_hs = schedule.handshake_traffic_secrets(self.transcript.all_bytes())
        self.records.protect_reads(self.cipher, s_hs)
        self.records.protect_writes(self.cipher, c_hs)

        self.recv_msg(HandshakeType.ENCRYPTED_EXTENSIONS)

        first_types = {
            None: (HandshakeType.CERTIFICATE_REQUEST, HandshakeType.CERTIFICATE),
            AuthnMode.UNSPECIFIED: (HandshakeType.SSI_REQUEST,
                                    HandshakeType.CERTIFICATE_REQUEST,
                                    HandshakeType.CERTIFICATE),
            AuthnMode.VC: (HandshakeType.SSI_REQUEST, HandshakeType.CERTIFICATE_REQUEST,
                           HandshakeType.CERTIFICATE, HandshakeType.VC),
            AuthnMode.DID: (HandshakeType.SSI_REQUEST, HandshakeType.CERTIFICATE_REQUEST,
                            HandshakeType.CERTIFICATE, HandshakeType.DID),
        }[sent_params.mode if sent_params is not None else None]
        msg = self.recv_msg(*first_types)

        auth_request: tuple[str, tuple[int, ...]] | None = None
        saw_ssi_request = False
        if isinstance(msg, CertificateRequest):
            self._check_certificate_request(msg)
            auth_request = ("x509", ())
            remaining = tuple(t for t in first_types
                              if t not in (HandshakeType.CERTIFICATE_REQUEST,
                                           HandshakeType.SSI_REQUEST))
            msg = self.recv_msg(*remaining)
        elif isinstance(msg, SsiRequest):
            saw_ssi_request = True
            auth_request = self._check_ssi_request(msg, sent_params)
            if sent_params.mode is AuthnMode.UNSPECIFIED:
                msg = self.recv_msg(HandshakeType.CERTIFICATE)
            elif sent_params.mode is AuthnMode.VC:
                msg = self.recv_msg(HandshakeType.VC)
            else:
                msg = self.recv_msg(HandshakeType.DID)

        # server identity
        if isinstance(msg, Certificate):
            server_auth = "x509"
            suite, public_key, peer = self.process_certificate(msg)
            th_before = self.transcript_hash()
            verify_msg = self.recv_msg(HandshakeType.CERTIFICATE_VERIFY)
            self.check_verify_message(verify_msg, "certificate_verify", suite,
                                      public_key, th_before)
        elif isinstance(msg, VcMessage):
            server_auth = "vc"
            suite, public_key, peer = self.process_vc_message(
                msg, sent_params.did_methods)
            th_before = self.transcript_hash()
            verify_msg = self.recv_msg(HandshakeType.DID_VERIFY)
            self.check_verify_message(verify_msg, "did_verify", suite,
                                      public_key, th_before)
        else:
            server_auth = "did"
            suite, public_key, peer = self.process_did_message(
                msg, sent_params.did_methods)
            th_before = self.transcript_hash()
            verify_msg = self.recv_msg(HandshakeType.DID_VERIFY)
            self.check_verify_message(verify_msg, "did_verify", suite,
                                      public_key, th_before)

        self.check_finished(s_hs)
        c_ap, s_ap = schedule.app_traffic_secrets(self.transcript.all_bytes())
        self.records.protect_reads(self.cipher, s_ap)

        if auth_request is not None:
            req_kind, _methods = auth_request
            if req_kind == "x509":
                self.send_x509_identity()
            else:
                self.send_ssi_identity(req_kind)
        self.send_finished(c_hs)
        self.records.protect_writes(self.cipher, c_ap)

        flow = self._flow(sent_params, server_auth, auth_request, saw_ssi_request)
        keys = SessionKeys(c_hs, s_hs, c_ap, s_ap, self.cipher)
        return HandshakeOutcome(flow, keys, peer, self.transcript, self.cipher,
                                dict(self.timers),
                                SecureSession(self.records, self.stream))

    def _proposed_parameters(self) -> SsiParameters | None:
        mode = self.config.preferred_mode
        if mode is Mode.X509:
            return None
        if mode is Mode.VC_PEER_X509:
            return SsiParameters(AuthnMode.UNSPECIFIED, ())
        authn = AuthnMode.VC if mode is Mode.VC else AuthnMode.DID
        return SsiParameters(authn, tuple(self.config.supported_methods))

    def _check_certificate_request(self, msg: CertificateRequest) -> None:
        if self.config.x509_identity is None:
            self.abort(NegotiationMismatch("server requires X.509 client"
                                           " authentication we cannot provide"))
        algs = msg.extensions.get(ExtensionType.SIGNATURE_ALGORITHMS)
        if algs is not None:
            offered = decode_signature_algorithms(algs)
            if self.config.x509_identity.keys.suite.scheme_code not in offered:
                self.abort(NegotiationMismatch("our certificate suite is not"
                                               " acceptable to the server"))

    def _check_ssi_request(self, msg: SsiRequest,
                           sent: SsiParameters) -> tuple[str, tuple[int, ...]]:
        params = msg.ssi_parameters
        if params.mode is AuthnMode.UNSPECIFIED:
            self.abort(NegotiationMismatch("SSIRequest carries no authentication mode"))
        if sent.mode is not AuthnMode.UNSPECIFIED and params.mode is not sent.mode:
            self.abort(NegotiationMismatch(
                "server switched the authentication mode"))
        if sent.did_methods:
            if not params.did_methods:
                self.abort(NegotiationMismatch("SSIRequest with no common DID methods"))
            for m in params.did_methods:
                if m not in sent.did_methods:
                    self.abort(NegotiationMismatch(
                        f"SSIRequest lists method {m} we never offered"))
        ident = self.config.ssi_identity
        if ident is None:
            self.abort(NegotiationMismatch("no SSI identity for client authentication"))
        if ident.did.method.code not in params.did_methods:
            self.abort(NegotiationMismatch(
                "we hold no DID in a ledger the server can resolve"))
        if params.mode is AuthnMode.VC and ident.vc is None:
            self.abort(NegotiationMismatch("server asked for a credential we lack"))
        if ident.keys.suite.scheme_code not in msg.signature_algorithms:
            self.abort(NegotiationMismatch("our signing suite is not acceptable"))
        return ("vc" if params.mode is AuthnMode.VC else "did", params.did_methods)

    @staticmethod
    def _flow(sent: SsiParameters | None, server_auth: str,
              auth_request, saw_ssi_request: bool) -> Flow:
        if sent is None:
            return Flow.ORIGINAL
        if sent.mode is AuthnMode.UNSPECIFIED:
            return Flow.HYBRID_SERVER_X509 if saw_ssi_request else Flow.ORIGINAL
        if server_auth == "x509":
            return Flow.FALLBACK
        if auth_request is not None and auth_request[0] == "x509":
            return Flow.HYBRID_CLIENT_X509
        return Flow.SSI_VC if server_auth == "vc" else Flow.SSI_DID


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------

class _Server(_Endpoint):
    role = "server"
    peer_role = "client"

    def run(self) -> HandshakeOutcome:
        config = self.config
        config.validate("server")
        rng = config.rng

        hello = self.recv_msg(HandshakeType.CLIENT_HELLO)
        if config.cipher_suite.code not in hello.cipher_suites:
            self.abort(NegotiationMismatch("no common cipher suite"))
        share_raw = hello.extensions.get(ExtensionType.KEY_SHARE)
        if share_raw is None:
            self.abort(NegotiationMismatch("client offered no key share"))
        try:
            shares = decode_key_share_client(share_raw)
        except DecodeError as exc:
            self.abort(DecodeAbort(str(exc)))
        client_public = next((key for group, key in shares if group == GROUP_X25519), None)
        if client_public is None:
            self.abort(NegotiationMismatch("client offered no x25519 share"))
        try:
            params = hello.ssi_parameters()
        except DecodeError as exc:
            self.abort(DecodeAbort(str(exc)))

        decision = negotiate_server_mode(params, config)

        ephemeral = generate_x25519(rng)
        shared = ecdhe_exchange(ephemeral, client_public)
        sh = ServerHello(
            random=rng.bytes(32),
            session_id=hello.session_id,
            cipher_suite=config.cipher_suite.code,
            extensions=ExtensionBlock((
                (int(ExtensionType.SUPPORTED_VERSIONS), b"\x03\x04"),
                (int(ExtensionType.KEY_SHARE),
                 encode_key_share_server(GROUP_X25519, ephemeral.public_key)),
            )),
        )
        self.send_msg(sh)

        schedule = KeySchedule(self.cipher)
        schedule.inject_ecdhe(shared)
        c_hs, s_hs = schedule.handshake_traffic_secrets(self.transcript.all_bytes())
        self.records.protect_writes(self.cipher, s_hs)
        self.records.protect_reads(self.cipher, c_hs)

        self.send_msg(EncryptedExtensions())

        if decision.client_auth == "x509":
            self.send_msg(CertificateRequest(b"", ExtensionBlock((
                (int(ExtensionType.SIGNATURE_ALGORITHMS),
                 encode_signature_algorithms(config.signature_algorithms)),
            ))))
        elif decision.client_auth in ("vc", "did"):
            mode = AuthnMode.VC if decision.client_auth == "vc" else AuthnMode.DID
            self.send_msg(SsiRequest(
                SsiParameters(mode, decision.ssi_request_methods),
                tuple(s.scheme_code for s in config.signature_algorithms)))

        if decision.server_auth == "x509":
            self.send_x509_identity()
        else:
            self.send_ssi_identity(decision.server_auth)

        self.send_finished(s_hs)
        c_ap, s_ap = schedule.app_traffic_secrets(self.transcript.all_bytes())
        self.records.protect_writes(self.cipher, s_ap)

        if decision.client_auth is not None:
            acceptable = decision.ssi_request_methods
            _suite, _pk, peer, _ = self.recv_peer_identity(decision.client_auth, acceptable)
        else:
            peer = PeerIdentity.anonymous()

        self.check_finished(c_hs)
        self.records.protect_reads(self.cipher, c_ap)

        keys = SessionKeys(c_hs, s_hs, c_ap, s_ap, self.cipher)
        return HandshakeOutcome(decision.flow, keys, peer, self.transcript,
                                self.cipher, dict(self.timers),
                                SecureSession(self.records, self.stream))


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------

def _run_wrapped(endpoint: _Endpoint) -> HandshakeOutcome:
    try:
        return endpoint.run()
    except HandshakeAbort:
        raise  # alert already sent
    except (PeerAlert, RecordError, TransportClosed):
        raise
    except DecodeError as exc:
        endpoint.records.send_alert(AlertDescription.DECODE_ERROR)
        raise DecodeAbort(str(exc)) from exc
    except Exception:
        # config errors and crypto failures: unblock the peer, then re-raise
        endpoint.records.send_alert(AlertDescription.INTERNAL_ERROR)
        raise


def run_client(config: EndpointConfig, transport) -> HandshakeOutcome:
    return _run_wrapped(_Client(config, transport))


def run_server(config: EndpointConfig, transport) -> HandshakeOutcome:
    return _run_wrapped(_Server(config, transport))


def handshake_pair(client_config: EndpointConfig, server_config: EndpointConfig,
                   timeout: float = 30.0) -> tuple[HandshakeOutcome, HandshakeOutcome]:
    """Run both endpoints over an in-memory pipe; re-raises either failure."""
    from .record import memory_pipe

    client_sock, server_sock = memory_pipe()
    client_sock.settimeout(timeout)
    server_sock.settimeout(timeout)
    result: dict = {}

    def serve():
        try:
            result["server"] = run_server(server_config, server_sock)
        except BaseException as exc:  # noqa: BLE001 - relayed to the caller
            result["server_error"] = exc

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    try:
        result["client"] = run_client(client_config, client_sock)
    except BaseException as exc:
        result["client_error"] = exc
    thread.join(timeout)

    if "client_error" in result and "server_error" in result:
        # the side that detected the problem is the interesting one
        client_exc, server_exc = result["client_error"], result["server_error"]
        primary = client_exc if isinstance(client_exc, HandshakeAbort) else server_exc
        raise primary
    if "server_error" in result:
        raise result["server_error"]
    if "client_error" in result:
        raise result["client_error"]
    return result["client"], result["server"]


class HandshakeServer:
    """Threaded TCP acceptor running one server handshake per connection.

    The default handler echoes application data until the peer closes.
    """

    def __init__(self, config: EndpointConfig | Callable[[], EndpointConfig],
                 host: str = "127.0.0.1", port: int = 0,
                 handler: Callable[[HandshakeOutcome], None] | None = None,
                 conn_timeout: float = 30.0):
        self._config = config
        self._handler = handler or echo_handler
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(64)
        self._listener.settimeout(0.2)
        self.address = self._listener.getsockname()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._conn_timeout = conn_timeout
        self.errors: list[BaseException] = []
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)

    def __enter__(self) -> "HandshakeServer":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()

    def start(self) -> "HandshakeServer":
        self._accept_thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        self._accept_thread.join(timeout=5)
        self._listener.close()
        for t in self._threads:
            t.join(timeout=5)

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
            t = threading.Thread(target=self._serve_one, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_one(self, conn: socket.socket) -> None:
        try:
            config = self._config() if callable(self._config) else self._config
            outcome = run_server(config, conn)
            self._handler(outcome)
        except (HandshakeAbort, PeerAlert, RecordError, TransportClosed,
                ConfigError, OSError) as exc:
            logger.debug("connection dropped: %s", exc)
            self.errors.append(exc)
        finally:
            try:
                conn.close()
            except OSError:
                pass


def echo_handler(outcome: HandshakeOutcome) -> None:
    session = outcome.session
    while True:
        try:
            data = session.recv()
        except (TransportClosed, PeerAlert, RecordError):
            return
        session.send(data)
