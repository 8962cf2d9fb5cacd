"""Key provisioning between vaults of one organisation, and backup built on it.

Before any quote is exchanged, each side looks up the peer platform in the
organisation's PCK cache and accepts the entry only if it carries a valid
signature by the organisation master key.  A platform without such an entry
is rejected with PckRejected.  Then both sides exchange an ephemeral ECDH key
together with an ECDSA quote over it; the quote's PCK certificate must be the
one the organisation signed.  The sender wraps its key pairs (with their
certificates) under the derived channel key; the receiver stores them as
non-extractable objects.

Messages:

    1  I -> R  PROVISION_HELLO      {node_type, platform_id}
    2  R -> I  PROVISION_HELLO_ACK  {platform_id}
    3  I -> R  PROVISION_QUOTE      {eph_pk, quote}
    4  R -> I  PROVISION_QUOTE      {eph_pk, quote}
    5  S -> Rx PROVISION_KEYS       {wrapped}
    6  Rx -> S PROVISION_DONE       {count, confirm}
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .. import attestation
from ..attestation import PckCacheEntry, QuoteType, TrustAnchors
from ..certkit import verify_chain
from ..crypto import KeyAlgorithm
from ..errors import (
    MalformedData,
    NotFound,
    OrgSignatureInvalid,
    OutOfOrder,
    PckRejected,
    QuoteInvalid,
    VaultError,
)
from ..keyvault import ASYMMETRIC_ALGORITHMS
from .channel import Channel, MemoryChannel, Session, run_pair
from .common import abort, discard, transcript_hash
from .messages import Message, MsgType

DONE_LABEL = b"provision-done"


class NodeType(str, enum.Enum):
    SENDER = "sender"
    RECEIVER = "receiver"

    @property
    def complement(self) -> "NodeType":
        return NodeType.RECEIVER if self is NodeType.SENDER else NodeType.SENDER


@dataclass
class OrgContext:
    """What a node needs to recognise sibling platforms of its organisation."""

    mpk: bytes
    pck_source: attestation.PckSource
    anchors: TrustAnchors
    expected_mrenclave: object = None
    min_svn: int = 0


@dataclass
class ProvisionParty:
    token: object
    pin: str
    platform_id: bytes
    org: OrgContext


@dataclass
class ProvisionResult:
    node_type: NodeType
    peer_platform: bytes
    handles: list[int]


def check_peer_platform(org: OrgContext, platform_id: bytes) -> PckCacheEntry:
    """Fetch the peer's org-signed PCK entry or raise PckRejected."""
    try:
        entry = attestation.fetch_pck_cert(platform_id, org.pck_source, org.mpk)
    except (NotFound, OrgSignatureInvalid) as exc:
        raise PckRejected(exc.detail, step="pck_check") from None
    root = org.anchors.manufacturer_root
    if root is not None:
        chain = verify_chain([entry.pck_cert], [root])
        if not chain:
            raise PckRejected(f"PCK certificate not issued by the manufacturer: {chain.reason.value}",
                              step="pck_check")
    return entry


def check_peer_quote(org: OrgContext, entry: PckCacheEntry, eph_pk: bytes,
                     quote_bytes: bytes) -> None:
    try:
        quote = attestation.Quote.from_bytes(quote_bytes)
    except MalformedData as exc:
        raise QuoteInvalid(f"unparseable quote: {exc.detail}", step="peer_quote") from None
    if quote.quote_type is not QuoteType.ECDSA:
        raise QuoteInvalid("provisioning requires an ECDSA quote", step="peer_quote")
    if quote.report.platform_id != entry.platform_id:
        raise QuoteInvalid("quote comes from a different platform than announced",
                           step="peer_quote")
    if quote.pck_chain[1].to_bytes() != entry.pck_cert.to_bytes():
        raise QuoteInvalid("quote PCK certificate differs from the organisation's cache",
                           step="peer_quote")
    verdict = attestation.verify_quote(quote, eph_pk, QuoteType.ECDSA, org.anchors,
                                       expected_mrenclave=org.expected_mrenclave,
                                       min_svn=org.min_svn)
    if not verdict:
        raise QuoteInvalid(f"{verdict.reason.value}: {verdict.detail}", step="peer_quote")


def transferable_handles(token) -> list[int]:
    return [o.handle for o in token.objects()
            if not o.volatile and o.algorithm in ASYMMETRIC_ALGORITHMS]


def _exchange_keys(s: Session, party: ProvisionParty, node_type: NodeType, transcript: bytes,
                   k: int, peer_pid: bytes, handles: list[int] | None) -> list[int]:
    t, pin = party.token, party.pin
    if node_type is NodeType.SENDER:
        s.name = "send_keys"
        chosen = transferable_handles(t) if handles is None else handles
        s.send(MsgType.PROVISION_KEYS, 5, wrapped=t.wrap_keys(k, chosen, transcript, pin))
        s.name = "done"
        done = s.expect(MsgType.PROVISION_DONE, 6)
        t.decrypt(k, done["confirm"], DONE_LABEL + transcript, pin)
        return list(chosen)
    s.name = "receive_keys"
    msg = s.expect(MsgType.PROVISION_KEYS, 5)
    stored = t.unwrap_keys(k, msg["wrapped"], transcript, pin, provenance={
        "protocol": "provision", "session": s.session_id, "peer_platform": peer_pid})
    confirm = t.encrypt(k, len(stored).to_bytes(4, "big"), DONE_LABEL + transcript, pin)
    s.name = "done"
    s.send(MsgType.PROVISION_DONE, 6, count=len(stored), confirm=confirm)
    return stored


def _quote_eph(party: ProvisionParty) -> tuple[int, bytes, bytes]:
    eph, eph_pk, quote = party.token.generate_keypair(
        KeyAlgorithm.ECDH_P256, "provision-eph", party.pin, quote_type=QuoteType.ECDSA,
        ephemeral=True)
    if quote is None:
        raise QuoteInvalid("local vault cannot produce quotes", step="quote")
    return eph, eph_pk, quote.to_bytes()


def provision_initiator(channel: Channel, party: ProvisionParty, node_type: NodeType | str,
                        handles: list[int] | None = None) -> ProvisionResult:
    node_type = NodeType(node_type)
    t, pin = party.token, party.pin
    s = Session(channel, name="hello")
    eph = k = None
    try:
        s.send(MsgType.PROVISION_HELLO, 1, node_type=node_type.value,
               platform_id=party.platform_id)
        peer_pid = s.expect(MsgType.PROVISION_HELLO_ACK, 2)["platform_id"]
        s.name = "pck_check"
        entry = check_peer_platform(party.org, peer_pid)
        s.name = "quote"
        eph, eph_pk, quote = _quote_eph(party)
        s.send(MsgType.PROVISION_QUOTE, 3, eph_pk=eph_pk, quote=quote)
        reply = s.expect(MsgType.PROVISION_QUOTE, 4)
        check_peer_quote(party.org, entry, reply["eph_pk"], reply["quote"])
        transcript = transcript_hash("provision", s.session_id, party.platform_id, peer_pid,
                                     eph_pk, reply["eph_pk"], quote, reply["quote"])
        k = t.derive_shared_key(eph, reply["eph_pk"], transcript, pin, purpose="provision")
        eph = None
        out = _exchange_keys(s, party, node_type, transcript, k, peer_pid, handles)
        discard(t, pin, k)
        t.record_event("provision_complete", {"role": node_type.value, "session": s.session_id,
                                              "peer_platform": peer_pid, "count": len(out)}, pin)
        return ProvisionResult(node_type, peer_pid, out)
    except VaultError as exc:
        abort(s, t, pin, exc, "provision")
        discard(t, pin, eph, k)
        raise


def provision_responder(channel: Channel, party: ProvisionParty, first: Message | None = None,
                        handles: list[int] | None = None) -> ProvisionResult:
    """Answer a PROVISION_HELLO, taking the opposite node type of the initiator."""
    t, pin = party.token, party.pin
    hello = first or channel.recv()
    s = Session(channel, hello.session_id, name="hello")
    eph = k = None
    try:
        if hello.type is not MsgType.PROVISION_HELLO or hello.step != 1:
            raise OutOfOrder(f"expected PROVISION_HELLO step 1, got {hello.type.name}",
                             step="hello")
        try:
            node_type = NodeType(hello["node_type"]).complement
        except ValueError:
            raise OutOfOrder(f"unknown node type {hello['node_type']!r}", step="hello") from None
        peer_pid = hello["platform_id"]
        s.name = "pck_check"
        entry = check_peer_platform(party.org, peer_pid)
        s.send(MsgType.PROVISION_HELLO_ACK, 2, platform_id=party.platform_id)
        s.name = "quote"
        msg = s.expect(MsgType.PROVISION_QUOTE, 3)
        check_peer_quote(party.org, entry, msg["eph_pk"], msg["quote"])
        eph, eph_pk, quote = _quote_eph(party)
        transcript = transcript_hash("provision", s.session_id, peer_pid, party.platform_id,
                                     msg["eph_pk"], eph_pk, msg["quote"], quote)
        k = t.derive_shared_key(eph, msg["eph_pk"], transcript, pin, purpose="provision")
        eph = None
        s.send(MsgType.PROVISION_QUOTE, 4, eph_pk=eph_pk, quote=quote)
        out = _exchange_keys(s, party, node_type, transcript, k, peer_pid, handles)
        discard(t, pin, k)
        t.record_event("provision_complete", {"role": node_type.value, "session": s.session_id,
                                              "peer_platform": peer_pid, "count": len(out)}, pin)
        return ProvisionResult(node_type, peer_pid, out)
    except VaultError as exc:
        abort(s, t, pin, exc, "provision")
        discard(t, pin, eph, k)
        raise


def backup_restore(source: ProvisionParty, target: ProvisionParty,
                   capture: list | None = None) -> list[int]:
    """Copy every key pair of ``source`` into ``target``; returns the target handles."""
    a, b = MemoryChannel.pair(capture)
    _, restored = run_pair(lambda: provision_initiator(a, source, NodeType.SENDER),
                           lambda: provision_responder(b, target))
    return restored.handles
