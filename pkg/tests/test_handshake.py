"""State-machine behaviour: the negotiation matrix, flow conformance with
key agreement and protected app data, and the soundness of every
authentication check under targeted tampering."""

import dataclasses
import datetime
import threading

import pytest

from ssitls import handshake
from ssitls.crypto import SignatureSuite, generate_keypair
from ssitls.handshake import (
    BadIdentity,
    BadSignature,
    EndpointConfig,
    FinishedMismatch,
    Flow,
    HandshakeAbort,
    Mode,
    NegotiationMismatch,
    ResolutionFailure,
    RevokedIdentity,
    SsiIdentity,
    handshake_pair,
    negotiate_server_mode,
    run_client,
    run_server,
)
from ssitls.identity import Did, did_deactivate, did_update, vc_issue
from ssitls.messages import AuthnMode, HandshakeType, SsiParameters
from ssitls.record import PeerAlert, RecordError, memory_pipe


def pair_results(client_config, server_config, payload=b"across the channel"):
    """Run both sides; returns (client outcome/exception, server o/e).
    On double success the protected echo is exercised too."""
    c_sock, s_sock = memory_pipe()
    c_sock.settimeout(20)
    s_sock.settimeout(20)
    box = {}

    def serve():
        try:
            box["server"] = run_server(server_config, s_sock)
        except BaseException as exc:
            box["server"] = exc

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    try:
        box["client"] = run_client(client_config, c_sock)
    except BaseException as exc:
        box["client"] = exc
    t.join(20)
    client, server = box.get("client"), box.get("server")
    if isinstance(client, handshake.HandshakeOutcome) and \
            isinstance(server, handshake.HandshakeOutcome):
        client.session.send(payload)
        assert server.session.recv() == payload
        server.session.send(payload[::-1])
        assert client.session.recv() == payload[::-1]
    c_sock.close()
    s_sock.close()
    return client, server


def assert_flow(client, server, flow: Flow):
    assert isinstance(client, handshake.HandshakeOutcome), client
    assert isinstance(server, handshake.HandshakeOutcome), server
    assert client.flow == server.flow == flow
    assert client.keys == server.keys


# ---------------------------------------------------------------------------
# Negotiation matrix: client preference x server capability
# ---------------------------------------------------------------------------

def _server_variant(u, capability: str) -> EndpointConfig:
    base = u.server_config(request_client_auth=True)
    if capability == "no-ssi":
        # a server without SSI support can only ask for X.509 client auth
        return dataclasses.replace(base, ssi_identity=None, ledger=None,
                                   supported_methods=(), client_auth_mode="x509")
    if capability == "on-method":
        return base
    if capability == "off-method":
        # DID registered under a ledger the client cannot reach
        foreign = dataclasses.replace(
            u.server_ssi, did=Did.parse("did:iota:" + "a" * 64))
        return dataclasses.replace(base, ssi_identity=foreign,
                                   supported_methods=(0,))
    raise ValueError(capability)


MATRIX = [
    (Mode.X509, "no-ssi", Flow.ORIGINAL),
    (Mode.X509, "on-method", Flow.ORIGINAL),
    (Mode.X509, "off-method", Flow.ORIGINAL),
    (Mode.VC, "no-ssi", Flow.FALLBACK),
    (Mode.VC, "on-method", Flow.SSI_VC),
    (Mode.VC, "off-method", Flow.FALLBACK),
    (Mode.DID, "no-ssi", Flow.FALLBACK),
    (Mode.DID, "on-method", Flow.SSI_DID),
    (Mode.DID, "off-method", Flow.FALLBACK),
    (Mode.VC_PEER_X509, "no-ssi", Flow.ORIGINAL),
    (Mode.VC_PEER_X509, "on-method", Flow.HYBRID_SERVER_X509),
    (Mode.VC_PEER_X509, "off-method", "abort:negotiation_mismatch"),
]


@pytest.mark.parametrize("mode,capability,expected", MATRIX)
def test_negotiation_matrix(ed_universe, mode, capability, expected):
    client_config = ed_universe.client_config(mode)
    server_config = _server_variant(ed_universe, capability)
    client, server = pair_results(client_config, server_config)
    if isinstance(expected, Flow):
        assert_flow(client, server, expected)
    else:
        kind = expected.split(":", 1)[1]
        assert isinstance(client, HandshakeAbort) and client.kind == kind
        assert not isinstance(server, handshake.HandshakeOutcome)


def test_negotiate_server_mode_is_pure_and_total(ed_universe):
    config = ed_universe.server_config(request_client_auth=True)
    for params in (None,
                   SsiParameters(AuthnMode.UNSPECIFIED, ()),
                   SsiParameters(AuthnMode.VC, (2,)),
                   SsiParameters(AuthnMode.VC, (0,)),
                   SsiParameters(AuthnMode.DID, (2,))):
        first = negotiate_server_mode(params, config)
        second = negotiate_server_mode(params, config)
        assert first == second


def test_fallback_when_server_lacks_client_methods(ed_universe):
    # the client lists only ledgers the server has no DID in
    config = ed_universe.server_config()
    decision = negotiate_server_mode(SsiParameters(AuthnMode.VC, (0, 1)), config)
    assert decision.flow == Flow.FALLBACK
    assert decision.server_auth == "x509"


def test_mutual_ssi_request_uses_common_method_set(ed_universe):
    config = ed_universe.server_config(request_client_auth=True,
                                       supported_methods=(0, 2))
    decision = negotiate_server_mode(SsiParameters(AuthnMode.VC, (2,)), config)
    assert decision.ssi_request_methods == (2,)
    assert decision.client_auth == "vc"


# ---------------------------------------------------------------------------
# Conformance flows (all nine) for one suite; the acceptance suite covers
# the full 9 x 3 grid.
# ---------------------------------------------------------------------------

FLOWS = [
    ("x509-uni", Mode.X509, {}, Flow.ORIGINAL, "anonymous"),
    ("x509-mut", Mode.X509,
     {"request_client_auth": True, "client_auth_mode": "x509"},
     Flow.ORIGINAL, "x509"),
    ("vc-uni", Mode.VC, {}, Flow.SSI_VC, "anonymous"),
    ("vc-mut", Mode.VC, {"request_client_auth": True}, Flow.SSI_VC, "did"),
    ("did-uni", Mode.DID, {}, Flow.SSI_DID, "anonymous"),
    ("did-mut", Mode.DID, {"request_client_auth": True}, Flow.SSI_DID, "did"),
    ("hybrid-2a", Mode.VC,
     {"request_client_auth": True, "client_auth_mode": "x509"},
     Flow.HYBRID_CLIENT_X509, "x509"),
    ("hybrid-2b", Mode.VC_PEER_X509, {"request_client_auth": True},
     Flow.HYBRID_SERVER_X509, "did"),
]


@pytest.mark.parametrize("name,mode,server_kw,flow,client_identity_kind",
                         FLOWS, ids=[f[0] for f in FLOWS])
def test_conformance_flow(ed_universe, name, mode, server_kw, flow,
                          client_identity_kind):
    u = ed_universe
    client, server = pair_results(u.client_config(mode), u.server_config(**server_kw))
    assert_flow(client, server, flow)
    assert server.peer.kind == client_identity_kind
    if flow in (Flow.SSI_VC, Flow.SSI_DID, Flow.HYBRID_CLIENT_X509):
        assert client.peer.did == u.server_ssi.did
    if flow == Flow.SSI_VC:
        assert client.peer.claims.get("role") == "server"


def test_fallback_both_trigger_causes(ed_universe):
    u = ed_universe
    # cause 1: server has no SSI support at all
    client, server = pair_results(
        u.client_config(Mode.VC),
        dataclasses.replace(u.server_config(), ssi_identity=None))
    assert_flow(client, server, Flow.FALLBACK)
    assert client.peer.kind == "x509"
    # cause 2: server's DID lives in a ledger the client did not offer
    foreign = dataclasses.replace(u.server_ssi,
                                  did=Did.parse("did:iota:" + "b" * 64))
    client, server = pair_results(
        u.client_config(Mode.VC),
        dataclasses.replace(u.server_config(), ssi_identity=foreign))
    assert_flow(client, server, Flow.FALLBACK)


def test_vc_mode_against_did_only_server_falls_back(ed_universe):
    u = ed_universe
    did_only = dataclasses.replace(u.server_ssi, vc=None)
    client, server = pair_results(
        u.client_config(Mode.VC),
        dataclasses.replace(u.server_config(), ssi_identity=did_only))
    assert_flow(client, server, Flow.FALLBACK)


def test_hybrid_2b_did_flavour(ed_universe):
    u = ed_universe
    client, server = pair_results(
        u.client_config(Mode.VC_PEER_X509),
        u.server_config(request_client_auth=True,
                        ssi_request_mode=AuthnMode.DID))
    assert_flow(client, server, Flow.HYBRID_SERVER_X509)
    assert server.peer.did == u.client_ssi.did
    assert server.peer.claims == {}  # bare DID carries no claims


def test_transcripts_match_between_peers(ed_universe):
    client, server = pair_results(ed_universe.client_config(Mode.VC),
                                  ed_universe.server_config())
    assert client.transcript.all_bytes() == server.transcript.all_bytes()


# ---------------------------------------------------------------------------
# Authentication soundness under tampering
# ---------------------------------------------------------------------------

def tamper_type(target: HandshakeType, mutate):
    def tamper(msg_type: int, raw: bytes) -> bytes:
        return mutate(raw) if msg_type == int(target) else raw
    return tamper


def _flip_tail(raw: bytes) -> bytes:
    out = bytearray(raw)
    out[-3] ^= 0x04
    return bytes(out)


def test_mutated_did_verify_rejected(ed_universe):
    u = ed_universe
    config = u.server_config()
    config.tamper = tamper_type(HandshakeType.DID_VERIFY, _flip_tail)
    client, server = pair_results(u.client_config(Mode.VC), config)
    assert isinstance(client, BadSignature)


def test_mutated_certificate_verify_rejected(ed_universe):
    u = ed_universe
    config = u.server_config()
    config.tamper = tamper_type(HandshakeType.CERTIFICATE_VERIFY, _flip_tail)
    client, server = pair_results(u.client_config(Mode.X509), config)
    assert isinstance(client, BadSignature)


def test_mutated_finished_rejected(ed_universe):
    u = ed_universe
    config = u.server_config()
    config.tamper = tamper_type(HandshakeType.FINISHED, _flip_tail)
    client, server = pair_results(u.client_config(Mode.DID), config)
    assert isinstance(client, FinishedMismatch)


def test_mutated_vc_proof_rejected(ed_universe):
    u = ed_universe
    vc = u.server_ssi.vc
    bad_proof = dataclasses.replace(
        vc.proof, proof_value=bytes([vc.proof.proof_value[0] ^ 1])
        + vc.proof.proof_value[1:])
    bad_identity = dataclasses.replace(u.server_ssi,
                                       vc=dataclasses.replace(vc, proof=bad_proof))
    client, server = pair_results(
        u.client_config(Mode.VC),
        dataclasses.replace(u.server_config(), ssi_identity=bad_identity))
    assert isinstance(client, BadIdentity)


def test_cross_session_did_verify_replay_rejected(ed_universe):
    u = ed_universe
    captured: list[bytes] = []

    def capture(msg_type: int, raw: bytes) -> bytes:
        if msg_type == int(HandshakeType.DID_VERIFY):
            captured.append(raw)
        return raw

    config_a = u.server_config()
    config_a.tamper = capture
    client, server = pair_results(u.client_config(Mode.VC), config_a)
    assert isinstance(client, handshake.HandshakeOutcome)
    assert captured

    def splice(raw: bytes) -> bytes:
        return captured[0]

    config_b = u.server_config()
    config_b.tamper = tamper_type(HandshakeType.DID_VERIFY, splice)
    client_b, _server_b = pair_results(u.client_config(Mode.VC), config_b)
    assert isinstance(client_b, BadSignature)


def test_resolved_key_substitution_rejected(fresh_universe):
    """A ledger answering with a different key makes DIDVerify fail."""
    u = fresh_universe

    class KeyTamperingLedger:
        def __init__(self, inner):
            self.inner = inner

        def get(self, msid):
            record = self.inner.get(msid)
            doc = dict(record.document)
            methods = [dict(m) for m in doc["authentication"]]
            from ssitls.identity import multibase_decode, multibase_encode
            pk = bytearray(multibase_decode(methods[0]["publicKeyMultibase"]))
            pk[0] ^= 0x01
            methods[0]["publicKeyMultibase"] = multibase_encode(bytes(pk))
            doc["authentication"] = methods
            return dataclasses.replace(record, payload={"document": doc})

        def put(self, record):
            self.inner.put(record)

    client, server = pair_results(
        u.client_config(Mode.DID, ledger=KeyTamperingLedger(u.store)),
        u.server_config())
    assert isinstance(client, BadSignature)


def test_foreign_method_did_message_is_negotiation_mismatch(ed_universe):
    u = ed_universe

    def foreign_did(raw: bytes) -> bytes:
        from ssitls.messages import DidMessage, encode
        return encode(DidMessage(0, b"did:iota:" + b"c" * 64))

    config = u.server_config()
    config.tamper = tamper_type(HandshakeType.DID, foreign_did)
    client, _server = pair_results(u.client_config(Mode.DID), config)
    assert isinstance(client, NegotiationMismatch)


def test_untrusted_did_rejected(fresh_universe):
    u = fresh_universe
    from ssitls.identity import TrustStore
    empty = TrustStore()
    empty.add_issuer(u.issuer_did, u.issuer_keys.suite, u.issuer_keys.public_key)
    client, _server = pair_results(
        u.client_config(Mode.DID, trust_store=empty), u.server_config())
    assert isinstance(client, BadIdentity)


def test_expired_credential_rejected(fresh_universe):
    u = fresh_universe
    past = datetime.datetime.now(datetime.timezone.utc) - datetime.timedelta(days=10)
    stale = vc_issue(u.issuer_keys, u.issuer_did, u.server_ssi.did,
                     {"role": "server"}, past, past + datetime.timedelta(days=1))
    expired_identity = dataclasses.replace(u.server_ssi, vc=stale)
    client, _server = pair_results(
        u.client_config(Mode.VC),
        dataclasses.replace(u.server_config(), ssi_identity=expired_identity))
    assert isinstance(client, BadIdentity)
    assert "expired" in str(client)


def test_untrusted_issuer_rejected(fresh_universe):
    u = fresh_universe
    from ssitls.identity import TrustStore
    no_issuers = TrustStore(trusted_dids=set(u.trust_store.trusted_dids))
    client, _server = pair_results(
        u.client_config(Mode.VC, trust_store=no_issuers), u.server_config())
    assert isinstance(client, BadIdentity)


def test_revoked_server_did_aborts_both_modes(fresh_universe):
    u = fresh_universe
    did_deactivate(u.store, u.server_ssi.did, u.server_ssi.keys)
    for mode in (Mode.DID, Mode.VC):
        client, _server = pair_results(u.client_config(mode), u.server_config())
        assert isinstance(client, RevokedIdentity)


def test_revoked_client_did_aborts_mutual(fresh_universe):
    u = fresh_universe
    did_deactivate(u.store, u.client_ssi.did, u.client_ssi.keys)
    _client, server = pair_results(u.client_config(Mode.VC),
                                   u.server_config(request_client_auth=True))
    assert isinstance(server, RevokedIdentity)


def test_stale_key_after_rotation_rejected(fresh_universe):
    u = fresh_universe
    new_keys = generate_keypair(SignatureSuite.ED25519)
    did_update(u.store, u.server_ssi.did, u.server_ssi.keys, new_keys)
    # server still signs with the rotated-out key
    client, _server = pair_results(u.client_config(Mode.DID), u.server_config())
    assert isinstance(client, BadSignature)


def test_client_hello_tampered_in_flight_detected(ed_universe):
    """A wire-level attacker flipping plaintext ClientHello bits desynchronises
    the transcripts, so the first protected flight fails authentication."""
    u = ed_universe
    c_sock, s_sock = memory_pipe()
    c_sock.settimeout(20)
    s_sock.settimeout(20)

    class BitFlipTransport:
        def __init__(self, sock):
            self.sock = sock
            self.tampered = False

        def sendall(self, data):
            if not self.tampered and len(data) > 60:
                out = bytearray(data)
                out[-1] ^= 0x01  # inside the trailing ssi_parameters methods
                data = bytes(out)
                self.tampered = True
            self.sock.sendall(data)

        def recv(self, n):
            return self.sock.recv(n)

        def close(self):
            self.sock.close()

    box = {}

    def serve():
        try:
            box["server"] = run_server(u.server_config(), s_sock)
        except BaseException as exc:
            box["server"] = exc

    t = threading.Thread(target=serve, daemon=True)
    t.start()
    with pytest.raises((RecordError, HandshakeAbort, PeerAlert)):
        run_client(u.client_config(Mode.VC), BitFlipTransport(c_sock))
    t.join(20)
    assert not isinstance(box.get("server"), handshake.HandshakeOutcome)
    c_sock.close()
    s_sock.close()


def test_aborted_flows_yield_no_keys(ed_universe):
    u = ed_universe
    config = u.server_config()
    config.tamper = tamper_type(HandshakeType.FINISHED, _flip_tail)
    client, server = pair_results(u.client_config(Mode.VC), config)
    assert not isinstance(client, handshake.HandshakeOutcome)
    # the server never saw the client Finished, so it cannot have completed
    assert not isinstance(server, handshake.HandshakeOutcome)


def test_client_requires_ssi_identity_for_ssi_modes(ed_universe):
    config = ed_universe.client_config(Mode.VC)
    config.ssi_identity = None
    with pytest.raises(handshake.ConfigError):
        run_client(config, None)
