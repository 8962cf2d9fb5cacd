"""Certificate issuance between a website vault and a CA vault.

Website side, in order:

1. fetch the CA certificate (it carries the CA's quote as ``bf-quote``)
2. check the quote locally: it must bind the CA key and come from an
   expected enclave build                      -> CAQuoteInvalid
3. have the verification service vouch for the quote signature
                                               -> IASRejected
4. generate a key + CSR inside the vault, quote the CSR key
5. send CSR and quote, receive the certificate
6. check the certificate was issued by the fetched CA -> CertIssuerMismatch

The CA side only issues when the CSR's quote binds the CSR key (unless quote
checking is switched off) and embeds that quote in the issued certificate.
"""

from __future__ import annotations

from dataclasses import dataclass

from .. import attestation
from ..attestation import QuoteCheck, QuoteType, TrustAnchors
from ..certkit import (
    CSR,
    LEAF_VALIDITY,
    QUOTE_EXTENSION,
    BlindCert,
    gen_csr,
    inspect_cert_quote,
    issue_cert,
    verify_cert,
)
from ..crypto import KeyAlgorithm
from ..encoding import sha256
from ..errors import (
    BadCSR,
    CAQuoteInvalid,
    CertIssuerMismatch,
    IASRejected,
    MalformedData,
    MissingQuoteExtension,
    OutOfOrder,
    QuoteInvalid,
    VaultError,
    VerificationServiceRequired,
)
from .channel import Channel, Session
from .common import abort
from .messages import Message, MsgType

LOCAL_FAILURES = {QuoteCheck.REPORT_DATA_MISMATCH, QuoteCheck.MRENCLAVE_MISMATCH,
                  QuoteCheck.TCB_OUTDATED}


def check_ca_certificate(ca_cert: BlindCert, anchors: TrustAnchors, expected_mrenclave,
                         min_svn: int = 0, min_tcb: int = 0, now: float | None = None) -> None:
    """Raise unless ``ca_cert`` is self-signed and its quote passes every check."""
    if not ca_cert.is_self_issued or not verify_cert(ca_cert, ca_cert, now):
        raise CAQuoteInvalid("CA certificate is not a valid self-signed certificate", step="inspect")
    try:
        verdict = inspect_cert_quote(ca_cert, expected_mrenclave, anchors, min_svn, min_tcb)
    except MissingQuoteExtension as exc:
        raise CAQuoteInvalid(exc.detail, step="inspect") from None
    except VerificationServiceRequired as exc:
        raise IASRejected(exc.detail, step="ias_verify") from None
    if LOCAL_FAILURES.intersection(verdict.failures):
        raise CAQuoteInvalid(verdict.detail, step="inspect")
    if not verdict.ok:
        quote = attestation.Quote.from_bytes(ca_cert.quote_bytes())
        if quote.quote_type is QuoteType.EPID:
            raise IASRejected(verdict.detail, step="ias_verify")
        raise CAQuoteInvalid(verdict.detail, step="inspect")


def _parse_cert(data: bytes, error: type, step: str) -> BlindCert:
    try:
        return BlindCert.from_bytes(data)
    except MalformedData as exc:
        raise error(f"unparseable certificate: {exc.detail}", step=step) from None


def fetch_ca_cert(channel: Channel) -> BlindCert:
    """One-shot CERT_FETCH exchange."""
    s = Session(channel, name="fetch")
    s.send(MsgType.CERT_FETCH, 1)
    return _parse_cert(s.expect(MsgType.CERT_RESPONSE, 1)["cert"], CAQuoteInvalid, "fetch")


def issuance_website(channel: Channel, token, pin: str, subject: str, anchors: TrustAnchors,
                     expected_ca_mrenclave, *, min_svn: int = 0, min_tcb: int = 0,
                     quote_type: QuoteType | None = None,
                     algorithm: KeyAlgorithm = KeyAlgorithm.RSA2048,
                     now: float | None = None) -> BlindCert:
    """Obtain a certificate for a fresh vault key from an attested CA."""
    s = Session(channel, name="fetch")
    handle = None
    try:
        s.send(MsgType.CERT_FETCH, 1)
        ca_cert = _parse_cert(s.expect(MsgType.CERT_RESPONSE, 1)["cert"], CAQuoteInvalid, "fetch")
        s.name = "inspect"
        check_ca_certificate(ca_cert, anchors, expected_ca_mrenclave, min_svn, min_tcb, now)
        s.name = "csr"
        csr, handle, quote = gen_csr(token, subject, pin, algorithm, quote_type=quote_type)
        s.send(MsgType.ISSUE_REQUEST, 2, csr=csr.to_bytes(), quote=quote.to_bytes())
        s.name = "issue"
        raw = s.expect(MsgType.ISSUE_RESPONSE, 2)["cert"]
        s.name = "verify"
        cert = _parse_cert(raw, CertIssuerMismatch, "verify")
        verdict = verify_cert(cert, ca_cert, now)
        if not verdict:
            raise CertIssuerMismatch(f"{verdict.reason.value}: {verdict.detail}", step="verify")
        if cert.subject_public_key != csr.public_key:
            raise CertIssuerMismatch("certificate is for a different key than the CSR", step="verify")
        token.attach_cert(handle, cert.to_bytes(), pin)
        token.record_event("issuance_complete", {
            "role": "website", "session": s.session_id, "ca": ca_cert.fingerprint,
            "cert": cert.fingerprint}, pin)
        return cert
    except VaultError as exc:
        abort(s, token, pin, exc, "issuance")
        if handle is not None:
            try:
                token.destroy_object(handle, pin)
            except VaultError:
                pass
        raise


@dataclass
class CertificateAuthority:
    """CA-side issuance policy around a vault-resident CA key."""

    token: object
    pin: str
    cert: BlindCert
    anchors: TrustAnchors
    expected_mrenclave: object = None
    verify_csr_quotes: bool = True
    min_svn: int = 0
    min_tcb: int = 0
    validity: int = LEAF_VALIDITY

    def issue(self, csr_bytes: bytes, quote_bytes: bytes) -> BlindCert:
        params = {"csr": sha256(csr_bytes), "quote": sha256(quote_bytes)}
        try:
            cert = self._issue(csr_bytes, quote_bytes)
        except VaultError as exc:
            self.token.record_event("issue_reject", dict(params, code=exc.code), self.pin)
            raise
        # Same request => same params_hash, so replays show up in log analysis.
        self.token.record_event("issue_request", params, self.pin)
        return cert

    def _issue(self, csr_bytes: bytes, quote_bytes: bytes) -> BlindCert:
        try:
            csr = CSR.from_bytes(csr_bytes)
        except MalformedData as exc:
            raise BadCSR(exc.detail) from None
        if not csr.proof_of_possession():
            raise BadCSR(f"self-signature on CSR for {csr.subject!r} does not verify")
        if self.verify_csr_quotes:
            try:
                quote = attestation.Quote.from_bytes(quote_bytes)
            except MalformedData as exc:
                raise QuoteInvalid(f"unparseable quote: {exc.detail}", step="check_csr") from None
            try:
                verdict = attestation.verify_quote(
                    quote, csr.public_key, quote.quote_type, self.anchors,
                    expected_mrenclave=self.expected_mrenclave,
                    min_svn=self.min_svn, min_tcb=self.min_tcb)
            except VerificationServiceRequired as exc:
                raise QuoteInvalid(exc.detail, step="check_csr") from None
            if not verdict:
                raise QuoteInvalid(f"{verdict.reason.value}: {verdict.detail}", step="check_csr")
        extensions = {QUOTE_EXTENSION: quote_bytes} if quote_bytes else {}
        return issue_cert(csr, self.cert, self.token, self.pin, validity=self.validity,
                          extensions=extensions)


def issuance_ca(channel: Channel, ca: CertificateAuthority,
                first: Message | None = None) -> BlindCert | None:
    """Serve one issuance session.  Returns None when the peer only fetched the CA cert."""
    msg = first or channel.recv()
    s = Session(channel, msg.session_id, name="fetch")
    try:
        if msg.type is not MsgType.CERT_FETCH or msg.step != 1:
            raise OutOfOrder(f"session must start with CERT_FETCH, got {msg.type.name}",
                             step="fetch")
        s.send(MsgType.CERT_RESPONSE, 1, cert=ca.cert.to_bytes())
        s.name = "issue"
        try:
            req = s.expect(MsgType.ISSUE_REQUEST, 2)
        except (ConnectionError, OSError):
            return None
        cert = ca.issue(req["csr"], req["quote"])
        s.send(MsgType.ISSUE_RESPONSE, 2, cert=cert.to_bytes())
        return cert
    except VaultError as exc:
        s.report(exc)
        raise
