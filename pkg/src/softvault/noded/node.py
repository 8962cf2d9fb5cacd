"""A station: one platform, one role, one vault, and the sessions it serves."""

from __future__ import annotations

import logging
import threading
from pathlib import Path

from ..attestation import (
    AvrCache,
    PckCache,
    Quote,
    QuoteType,
    QuotingEnclave,
    TrustAnchors,
    make_quoter,
)
from ..certkit import BlindCert, gen_csr, refresh_quote, self_sign
from ..crypto import KeyAlgorithm
from ..errors import BadConfig, NotFound, UnsupportedForRole
from ..keyvault import Token
from ..protocols import issuance, provision, transfer
from ..protocols.channel import Channel, Session
from ..protocols.messages import Message, MsgType
from ..soft_tee import PlatformSecret
from . import setup
from .client import RemoteIas, RemotePckCache, connect
from .config import NodeConfig, parse_address

log = logging.getLogger("softvault.noded")

# Message types that may open a session, per role.  Everything else is
# rejected with UnsupportedForRole before any protocol code runs.
ACCEPTS: dict[str, frozenset[MsgType]] = {
    "ca": frozenset({MsgType.CERT_FETCH}),
    "website": frozenset({MsgType.PROVISION_HELLO}),
    "cdn": frozenset({MsgType.TRANSFER_HELLO, MsgType.PROVISION_HELLO}),
    "pck_cache": frozenset({MsgType.PCK_FETCH}),
    "ias": frozenset({MsgType.IAS_VERIFY}),
}


def _read_hex(path: Path | None, what: str) -> bytes | None:
    if path is None:
        return None
    try:
        return bytes.fromhex(Path(path).read_text().strip())
    except (OSError, ValueError) as exc:
        raise BadConfig(f"cannot read {what} from {path}: {exc}") from None


def _hex(value):
    if isinstance(value, bytes):
        return value.hex()
    return value


class Station:
    """Everything one node process holds.  Thread-safe for concurrent sessions."""

    def __init__(self, config: NodeConfig, recover: bool = False):
        self.config = config
        d = config.state_dir
        if not d.is_dir():
            raise BadConfig(f"state directory {d} does not exist")
        self.platform: PlatformSecret | None = None
        self.token: Token | None = None
        self.pin: str | None = None
        self.ca: issuance.CertificateAuthority | None = None
        self.ias_service = None
        self.pck_cache: PckCache | None = None
        self._cert_lock = threading.Lock()
        self.address = None
        if config.role == "pck_cache":
            # Entries are org-signed; the cache itself holds no secrets.
            self.pck_cache = PckCache.load(d / setup.PCK_CACHE_FILE)
            return
        secret = d / setup.PLATFORM_FILE
        if not secret.exists():
            raise BadConfig(f"no platform secret at {secret}; initialise the node first")
        self.platform = PlatformSecret.load(secret)
        if config.role == "ias":
            self.ias_service = setup.load_ias_state(d)
            return
        self.pin = config.resolve_pin()
        self.enclave = setup.node_enclave(self.platform, config.enclave_image,
                                          config.enclave_svn, config.tcb_version)
        self.qe = QuotingEnclave.load(self.platform, d / setup.QE_FILE)
        self.token = Token.open(d / setup.VAULT_FILE, self.pin, self.enclave,
                                quoter=make_quoter(self.enclave, self.qe, config.quote_type),
                                pin_delay=config.pin_delay, recover=recover)
        self.anchors = TrustAnchors(
            manufacturer_root=BlindCert.load(config.manufacturer_root)
            if config.manufacturer_root else None,
            ias=RemoteIas(config.ias, config.timeout) if config.ias else None,
            ias_public_key=_read_hex(config.ias_public_key, "verification service key"),
            avr_cache=AvrCache())
        if config.role == "ca":
            self.ca = issuance.CertificateAuthority(
                self.token, self.pin, self._ca_certificate(), self.anchors,
                expected_mrenclave=self.expected_mrenclave,
                verify_csr_quotes=config.verify_csr_quotes, min_svn=config.min_svn)

    # --- policy ------------------------------------------------------------

    @property
    def expected_mrenclave(self) -> list[bytes]:
        """Configured allowlist; defaults to this node's own build."""
        if self.config.expected_mrenclave:
            return list(self.config.expected_mrenclave)
        return [self.enclave.measurement.mrenclave]

    def org_context(self) -> provision.OrgContext:
        cfg = self.config
        if cfg.org_mpk is None or cfg.pck_cache is None:
            raise BadConfig("provisioning needs org_mpk and pck_cache in the node config")
        return provision.OrgContext(
            mpk=_read_hex(cfg.org_mpk, "organisation master key"),
            pck_source=RemotePckCache(cfg.pck_cache, cfg.timeout), anchors=self.anchors,
            expected_mrenclave=self.expected_mrenclave, min_svn=cfg.min_svn)

    def _stale(self, cert: BlindCert) -> bool:
        raw = cert.quote_bytes()
        if raw is None:
            return True
        m = Quote.from_bytes(raw).measurement
        own = self.enclave.measurement
        return (m.mrenclave != own.mrenclave or m.svn < own.svn
                or m.tcb_version < own.tcb_version)

    def _ca_certificate(self) -> BlindCert:
        """Load the CA cert, creating it on first start and re-quoting after upgrades."""
        path = self.config.path(setup.CA_CERT)
        if not path.exists():
            subject = self.config.subject or f"Softvault CA {self.platform.platform_id.hex()[:8]}"
            cert = self_sign(subject, self.token, self.pin, quote_type=self.config.cert_quote_type)
            cert.save(path)
            log.info("created CA certificate %s", cert.fingerprint.hex()[:16])
            return cert
        cert = BlindCert.load(path)
        if self._stale(cert):
            cert = refresh_quote(cert, self.token, self.pin,
                                 quote_type=self.config.cert_quote_type)
            cert.save(path)
            log.info("refreshed CA quote for svn=%d", self.enclave.measurement.svn)
        return cert

    def certified_key(self, handle: int | None = None, subject: str | None = None,
                      self_issued: bool | None = None) -> tuple[int, BlindCert]:
        """Pick the newest key carrying a certificate (optionally filtered)."""
        found = None
        for info in self.token.objects():
            if info.volatile or not info.cert:
                continue
            if handle is not None and info.handle != handle:
                continue
            cert = BlindCert.from_bytes(info.cert)
            if subject is not None and cert.subject != subject:
                continue
            if self_issued is not None and cert.is_self_issued != self_issued:
                continue
            if found is None or info.handle > found[0]:
                found = (info.handle, cert)
        if found is None:
            raise NotFound("no certified key in the vault matches")
        return found

    def node_certificate(self) -> tuple[int, BlindCert]:
        """The key a CDN edge presents during transfer, self-signed on first use."""
        with self._cert_lock:
            path = self.config.path(setup.NODE_CERT)
            if path.exists():
                cert = BlindCert.load(path)
                h = self.token.find_handle(cert.subject_public_key)
                if h is not None and not self._stale(cert):
                    return h, cert
                if h is not None:
                    cert = refresh_quote(cert, self.token, self.pin,
                                         quote_type=self.config.cert_quote_type)
                    cert.save(path)
                    return h, cert
            subject = self.config.subject or f"cdn-{self.platform.platform_id.hex()[:8]}"
            cert = self_sign(subject, self.token, self.pin, quote_type=self.config.cert_quote_type)
            cert.save(path)
            return self.token.find_handle(cert.subject_public_key), cert

    def transfer_party(self, handle: int, cert: BlindCert) -> transfer.TransferParty:
        return transfer.TransferParty(self.token, self.pin, handle, cert, self.anchors,
                                      expected_peer_mrenclave=self.expected_mrenclave,
                                      min_svn=self.config.min_svn)

    def provision_party(self) -> provision.ProvisionParty:
        return provision.ProvisionParty(self.token, self.pin, self.platform.platform_id,
                                        self.org_context())

    # --- inbound sessions ----------------------------------------------------

    def accepts(self, mtype: MsgType) -> bool:
        return mtype in ACCEPTS[self.config.role]

    def dispatch(self, channel: Channel, first: Message) -> None:
        """Serve one session whose first message is ``first``."""
        role = self.config.role
        if not self.accepts(first.type):
            raise UnsupportedForRole(f"{role} node does not accept {first.type.name}")
        log.info("%s session %s opened by %s", role, first.session_id.hex(), first.type.name)
        if self.token is not None:
            self.token.record_event("session_accept", {"type": first.type.name,
                                                       "session": first.session_id}, self.pin)
        if first.type is MsgType.CERT_FETCH:
            issuance.issuance_ca(channel, self.ca, first)
        elif first.type is MsgType.TRANSFER_HELLO:
            handle, cert = self.node_certificate()
            transfer.transfer_responder(channel, self.transfer_party(handle, cert), first)
        elif first.type is MsgType.PROVISION_HELLO:
            provision.provision_responder(channel, self.provision_party(), first)
        elif first.type is MsgType.PCK_FETCH:
            self._serve_pck(channel, first)
        elif first.type is MsgType.IAS_VERIFY:
            self._serve_ias(channel, first)

    def _serve_pck(self, channel: Channel, msg: Message) -> None:
        s = Session(channel, msg.session_id, name="pck_fetch")
        entry = self.pck_cache.lookup(msg["platform_id"])
        if entry is None:
            raise NotFound(f"no PCK entry for platform {msg['platform_id'].hex()}")
        s.send(MsgType.PCK_ENTRY, 1, entry=entry.to_bytes())

    def _serve_ias(self, channel: Channel, msg: Message) -> None:
        s = Session(channel, msg.session_id, name="ias_verify")
        quote = Quote.from_bytes(msg["quote"])
        s.send(MsgType.IAS_REPORT, 1, avr=self.ias_service.ias_verify(quote).to_bytes())

    # --- operator commands -----------------------------------------------------

    def _need_vault(self, command: str) -> Token:
        if self.token is None:
            raise UnsupportedForRole(f"{command} needs a vault; this is a {self.config.role} node")
        return self.token

    def control(self, command: str, args: dict | None = None) -> dict:
        """Run one operator command; results are JSON-friendly dicts."""
        args = dict(args or {})
        fn = COMMANDS.get(command)
        if fn is None:
            raise BadConfig(f"unknown command {command!r}")
        out = fn(self, args)
        return {k: _hex(v) for k, v in out.items()}

    def cmd_status(self, args: dict) -> dict:
        out = {"role": self.config.role}
        if self.platform is not None:
            out["platform_id"] = self.platform.platform_id
        if self.address:
            out["listen"] = f"{self.address[0]}:{self.address[1]}"
        if self.token is not None:
            m = self.enclave.measurement
            report = self.token.verify_log()
            out.update(mrenclave=m.mrenclave, svn=m.svn, tcb_version=m.tcb_version,
                       objects=len(self.token.objects()), log_entries=len(self.token.log),
                       log_status=report.status.value)
        if self.ias_service is not None:
            out["ias_public_key"] = self.ias_service.public_key
        if self.pck_cache is not None:
            out["pck_entries"] = len(self.pck_cache)
        return out

    def cmd_keygen(self, args: dict) -> dict:
        t = self._need_vault("keygen")
        alg = KeyAlgorithm.parse(args.get("algorithm", "rsa2048"))
        qt = QuoteType.parse(args["quote_type"]) if args.get("quote_type") else None
        handle, pub, quote = t.generate_keypair(alg, args.get("label", ""), self.pin,
                                                quote_type=qt, attest=args.get("attest", True))
        return {"handle": handle, "algorithm": alg.name, "public_key": pub,
                "quote": quote.to_bytes() if quote else None}

    def cmd_sign(self, args: dict) -> dict:
        t = self._need_vault("sign")
        sig = t.sign(int(args["handle"]), bytes.fromhex(args["message"]), self.pin)
        return {"handle": int(args["handle"]), "signature": sig}

    def cmd_csr(self, args: dict) -> dict:
        t = self._need_vault("csr")
        alg = KeyAlgorithm.parse(args.get("algorithm", "rsa2048"))
        qt = QuoteType.parse(args["quote_type"]) if args.get("quote_type") else None
        csr, handle, quote = gen_csr(t, args["subject"], self.pin, alg, quote_type=qt)
        return {"handle": handle, "csr": csr.armor(), "quote": quote.to_bytes()}

    def cmd_self_sign(self, args: dict) -> dict:
        t = self._need_vault("self-sign")
        qt = QuoteType.parse(args.get("quote_type", self.config.cert_quote_type))
        cert = self_sign(args["subject"], t, self.pin, quote_type=qt,
                         algorithm=KeyAlgorithm.parse(args.get("algorithm", "rsa2048")))
        return {"handle": t.find_handle(cert.subject_public_key), "cert": cert.armor(),
                "fingerprint": cert.fingerprint}

    def cmd_issue(self, args: dict) -> dict:
        t = self._need_vault("issue")
        qt = QuoteType.parse(args["quote_type"]) if args.get("quote_type") else None
        expected = ([bytes.fromhex(m) for m in args["expected_ca_mrenclave"]]
                    if args.get("expected_ca_mrenclave") else self.expected_mrenclave)
        ch = connect(parse_address(args["ca"]), self.config.timeout)
        try:
            cert = issuance.issuance_website(
                ch, t, self.pin, args["subject"], self.anchors, expected,
                min_svn=int(args.get("min_svn", self.config.min_svn)), quote_type=qt,
                algorithm=KeyAlgorithm.parse(args.get("algorithm", "rsa2048")))
        finally:
            ch.close()
        return {"handle": t.find_handle(cert.subject_public_key), "cert": cert.armor(),
                "fingerprint": cert.fingerprint, "issuer": cert.issuer}

    def cmd_transfer(self, args: dict) -> dict:
        t = self._need_vault("transfer")
        handle, cert = self.certified_key(
            int(args["handle"]) if args.get("handle") is not None else None,
            args.get("subject"), self_issued=False if args.get("handle") is None else None)
        ch = connect(parse_address(args["peer"]), self.config.timeout)
        try:
            peer = transfer.transfer_initiator(ch, self.transfer_party(handle, cert))
        finally:
            ch.close()
        return {"handle": handle, "sent": cert.fingerprint, "peer": peer.fingerprint,
                "peer_subject": peer.subject}

    def cmd_provision(self, args: dict) -> dict:
        self._need_vault("provision")
        node_type = provision.NodeType(args.get("node_type", "sender"))
        handles = [int(h) for h in args["handles"]] if args.get("handles") else None
        ch = connect(parse_address(args["peer"]), self.config.timeout)
        try:
            res = provision.provision_initiator(ch, self.provision_party(), node_type, handles)
        finally:
            ch.close()
        return {"node_type": res.node_type.value, "peer_platform": res.peer_platform,
                "handles": res.handles}

    def cmd_public_key(self, args: dict) -> dict:
        t = self._need_vault("public-key")
        return {"handle": int(args["handle"]), "public_key": t.public_key(int(args["handle"]))}

    def cmd_objects(self, args: dict) -> dict:
        t = self._need_vault("objects")
        return {"objects": [{"handle": o.handle, "algorithm": o.algorithm.name, "label": o.label,
                             "public_key": o.public_part.hex(),
                             "certified": bool(o.cert)} for o in t.objects()]}

    def cmd_log_verify(self, args: dict) -> dict:
        report = self._need_vault("log-verify").verify_log()
        return {"status": report.status.value, "detail": report.detail,
                "entries": len(self.token.log)}

    def cmd_export_log(self, args: dict) -> dict:
        t = self._need_vault("export-log")
        t.export_log(args["path"])
        return {"path": args["path"], "entries": len(t.log)}

    def cmd_refresh_quote(self, args: dict) -> dict:
        if self.ca is None:
            raise UnsupportedForRole("only CA nodes hold a published certificate")
        self.ca.cert = self._ca_certificate()
        return {"fingerprint": self.ca.cert.fingerprint}

    def close(self) -> None:
        if self.token is not None:
            self.token.close()


COMMANDS = {
    "status": Station.cmd_status,
    "keygen": Station.cmd_keygen,
    "sign": Station.cmd_sign,
    "csr": Station.cmd_csr,
    "self-sign": Station.cmd_self_sign,
    "issue": Station.cmd_issue,
    "transfer": Station.cmd_transfer,
    "provision": Station.cmd_provision,
    "public-key": Station.cmd_public_key,
    "objects": Station.cmd_objects,
    "log-verify": Station.cmd_log_verify,
    "export-log": Station.cmd_export_log,
    "refresh-quote": Station.cmd_refresh_quote,
}

