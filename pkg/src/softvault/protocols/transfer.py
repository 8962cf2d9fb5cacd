"""Website -> CDN private-key transfer: authenticated ECDH where quotes act as signatures.

Each side sends its certificate (with an embedded quote), a fresh ephemeral
ECDH public key, and a signature over that key made with the certificate key.
The receiver of those three checks, in order:

1. the certificate quote binds the certificate key and comes from an
   expected enclave build                          -> PeerQuoteInvalid
2. the signature over the ephemeral key verifies   -> PeerSignatureInvalid
3. (optional) the certificate chains to a trusted issuer -> PeerCertUntrusted

Only then is the channel key derived, bound to the transcript hash of the
session id, both certificates and both ephemeral keys.  The website sends its
key wrapped under that channel key; nothing else ever carries key material.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .. import crypto
from ..attestation import TrustAnchors
from ..certkit import BlindCert, inspect_cert_quote, verify_chain
from ..crypto import KeyAlgorithm
from ..errors import (
    InvalidCurvePoint,
    MalformedData,
    MissingQuoteExtension,
    OutOfOrder,
    PeerCertUntrusted,
    PeerQuoteInvalid,
    PeerSignatureInvalid,
    VaultError,
    VerificationServiceRequired,
)
from ..keyvault import ephemeral_binding_message
from .channel import Channel, Session
from .common import abort, discard, transcript_hash
from .messages import Message, MsgType

INITIATOR = b"I"
RESPONDER = b"R"
DONE_LABEL = b"transfer-done"


@dataclass
class TransferParty:
    """One side of a transfer: its vault, certificate key and verification policy."""

    token: object
    pin: str
    handle: int
    cert: BlindCert
    anchors: TrustAnchors
    expected_peer_mrenclave: object = None
    min_svn: int = 0
    trusted_issuers: list = field(default=None)
    now: float | None = None


def binding_context(role: bytes, session_id: bytes) -> bytes:
    return b"transfer/" + role + session_id


def authenticate_peer(party: TransferParty, msg: Message, peer_role: bytes) -> BlindCert:
    """Run the three peer checks on a HELLO/REPLY message; returns the peer cert."""
    try:
        cert = BlindCert.from_bytes(msg["cert"])
    except MalformedData as exc:
        raise PeerQuoteInvalid(f"unparseable peer certificate: {exc.detail}",
                               step="peer_quote") from None
    try:
        verdict = inspect_cert_quote(cert, party.expected_peer_mrenclave, party.anchors,
                                     min_svn=party.min_svn)
    except (MissingQuoteExtension, VerificationServiceRequired) as exc:
        raise PeerQuoteInvalid(exc.detail, step="peer_quote") from None
    if not verdict:
        raise PeerQuoteInvalid(f"{verdict.reason.value}: {verdict.detail}", step="peer_quote")
    try:
        crypto.load_ec_point(msg["eph_pk"])
    except InvalidCurvePoint as exc:
        raise PeerSignatureInvalid(f"peer ephemeral key invalid: {exc.detail}",
                                   step="peer_signature") from None
    signed = ephemeral_binding_message(binding_context(peer_role, msg.session_id), msg["eph_pk"])
    if not crypto.verify_signature(cert.subject_public_key, signed, msg["sig"]):
        raise PeerSignatureInvalid("signature over the peer ephemeral key does not verify",
                                   step="peer_signature")
    if party.trusted_issuers is not None:
        chain = verify_chain([cert], party.trusted_issuers, party.now)
        if not chain and not any(cert.fingerprint == t.fingerprint
                                 for t in party.trusted_issuers):
            raise PeerCertUntrusted(f"{chain.reason.value}: {chain.detail}", step="peer_cert")
    return cert


def _transcript(session_id: bytes, init_cert: bytes, resp_cert: bytes,
                init_pk: bytes, resp_pk: bytes) -> bytes:
    return transcript_hash("transfer", session_id, init_cert, resp_cert, init_pk, resp_pk)


def _ephemeral(party: TransferParty, role: bytes, session_id: bytes) -> tuple[int, bytes, bytes]:
    t, pin = party.token, party.pin
    eph, eph_pk, _ = t.generate_keypair(KeyAlgorithm.ECDH_P256, "transfer-eph", pin,
                                        attest=False, ephemeral=True)
    sig = t.sign_ephemeral_binding(party.handle, eph, binding_context(role, session_id), pin)
    return eph, eph_pk, sig


def transfer_initiator(channel: Channel, party: TransferParty,
                       handles: list[int] | None = None) -> BlindCert:
    """Website side.  Sends ``handles`` (default: its own certificate key); returns the peer cert."""
    t, pin = party.token, party.pin
    s = Session(channel, name="hello")
    eph = k = None
    try:
        eph, eph_pk, sig = _ephemeral(party, INITIATOR, s.session_id)
        own = party.cert.to_bytes()
        s.send(MsgType.TRANSFER_HELLO, 1, cert=own, eph_pk=eph_pk, sig=sig)
        s.name = "reply"
        reply = s.expect(MsgType.TRANSFER_REPLY, 2)
        peer = authenticate_peer(party, reply, RESPONDER)
        s.name = "derive"
        transcript = _transcript(s.session_id, own, reply["cert"], eph_pk, reply["eph_pk"])
        k = t.derive_shared_key(eph, reply["eph_pk"], transcript, pin, purpose="transfer")
        eph = None
        s.name = "send_key"
        wrapped = t.wrap_keys(k, handles if handles is not None else [party.handle],
                              transcript, pin)
        s.send(MsgType.TRANSFER_KEY, 3, wrapped=wrapped)
        s.name = "done"
        done = s.expect(MsgType.TRANSFER_DONE, 4)
        t.decrypt(k, done["confirm"], DONE_LABEL + transcript, pin)
        discard(t, pin, k)
        t.record_event("transfer_complete", {"role": "initiator", "session": s.session_id,
                                             "peer": peer.fingerprint}, pin)
        return peer
    except VaultError as exc:
        abort(s, t, pin, exc, "transfer")
        discard(t, pin, eph, k)
        raise


def transfer_responder(channel: Channel, party: TransferParty,
                       first: Message | None = None) -> list[int]:
    """CDN side.  Returns the vault handles of the received keys."""
    t, pin = party.token, party.pin
    hello = first or channel.recv()
    s = Session(channel, hello.session_id, name="hello")
    eph = k = None
    try:
        if hello.type is not MsgType.TRANSFER_HELLO or hello.step != 1:
            raise OutOfOrder(f"expected TRANSFER_HELLO step 1, got {hello.type.name}", step="hello")
        peer = authenticate_peer(party, hello, INITIATOR)
        eph, eph_pk, sig = _ephemeral(party, RESPONDER, s.session_id)
        own = party.cert.to_bytes()
        transcript = _transcript(s.session_id, hello["cert"], own, hello["eph_pk"], eph_pk)
        k = t.derive_shared_key(eph, hello["eph_pk"], transcript, pin, purpose="transfer")
        eph = None
        s.name = "reply"
        s.send(MsgType.TRANSFER_REPLY, 2, cert=own, eph_pk=eph_pk, sig=sig)
        s.name = "receive_key"
        msg = s.expect(MsgType.TRANSFER_KEY, 3)
        stored = t.unwrap_keys(k, msg["wrapped"], transcript, pin, provenance={
            "protocol": "transfer", "session": s.session_id, "peer": peer.fingerprint})
        confirm = t.encrypt(k, len(stored).to_bytes(4, "big"), DONE_LABEL + transcript, pin)
        s.name = "done"
        s.send(MsgType.TRANSFER_DONE, 4, confirm=confirm)
        discard(t, pin, k)
        return stored
    except VaultError as exc:
        abort(s, t, pin, exc, "transfer")
        discard(t, pin, eph, k)
        raise

