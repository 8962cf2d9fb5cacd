"""Simplified certificates (BlindCert), CSRs, issuance and chain checks.

Certificates use a fixed binary layout instead of X.509/DER.  The signed
payload (``tbs_bytes``) covers every field except the signature, including the
``bf-quote`` extension that carries an attestation quote for the subject key.
"""

from __future__ import annotations

import base64
import enum
import os
import textwrap
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable, Mapping

from . import crypto
from .crypto import KeyAlgorithm, SigAlgorithm
from .encoding import Reader, Writer, sha256
from .errors import AuthFailure, BadCSR, MalformedData, MissingQuoteExtension

if TYPE_CHECKING:
    from .attestation import Quote, QuoteType, QuoteVerdict, TrustAnchors
    from .keyvault import Token

CERT_MAGIC = b"BFCERT01"
CSR_MAGIC = b"BFCSR001"
QUOTE_EXTENSION = "bf-quote"

DAY = 86400
CA_VALIDITY = 3650 * DAY
LEAF_VALIDITY = 90 * DAY


def _now(now: float | None) -> int:
    return int(time.time() if now is None else now)


@dataclass(frozen=True)
class BlindCert:
    serial: bytes
    subject: str
    issuer: str
    not_before: int
    not_after: int
    subject_public_key: bytes
    sig_algorithm: SigAlgorithm
    extensions: Mapping[str, bytes] = field(default_factory=dict)
    signature: bytes = b""

    def tbs_bytes(self) -> bytes:
        w = (Writer().raw(CERT_MAGIC).fixed(self.serial, 16).text(self.subject).text(self.issuer)
             .u64(self.not_before).u64(self.not_after).blob(self.subject_public_key)
             .u8(self.sig_algorithm).u16(len(self.extensions)))
        for key in sorted(self.extensions):
            w.text(key).blob(self.extensions[key])
        return w.getvalue()

    def to_bytes(self) -> bytes:
        return Writer().raw(self.tbs_bytes()).blob(self.signature).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BlindCert":
        r = Reader(data)
        if r.fixed(8) != CERT_MAGIC:
            raise MalformedData("not a BlindCert")
        serial = r.fixed(16)
        subject, issuer = r.text(), r.text()
        not_before, not_after = r.u64(), r.u64()
        spki = r.blob()
        try:
            sig_alg = SigAlgorithm(r.u8())
        except ValueError as exc:
            raise MalformedData("unknown signature algorithm") from exc
        extensions: dict[str, bytes] = {}
        previous = None
        for _ in range(r.u16()):
            key = r.text()
            if previous is not None and key <= previous:
                raise MalformedData("extensions not in canonical order")
            extensions[key] = r.blob()
            previous = key
        signature = r.blob()
        r.end()
        return cls(serial, subject, issuer, not_before, not_after, spki, sig_alg, extensions, signature)

    @property
    def fingerprint(self) -> bytes:
        return sha256(self.to_bytes())

    @property
    def is_self_issued(self) -> bool:
        return self.subject == self.issuer

    def armor(self) -> str:
        return armor(self.to_bytes(), "BLINDCERT")

    @classmethod
    def from_armor(cls, text: str) -> "BlindCert":
        return cls.from_bytes(dearmor(text, "BLINDCERT"))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.armor())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BlindCert":
        """Read an armored or raw binary certificate file."""
        data = Path(path).read_bytes()
        if data.startswith(CERT_MAGIC):
            return cls.from_bytes(data)
        return cls.from_armor(data.decode("ascii", errors="replace"))

    def quote_bytes(self) -> bytes | None:
        return self.extensions.get(QUOTE_EXTENSION)


@dataclass(frozen=True)
class CSR:
    subject: str
    public_key: bytes
    sig_algorithm: SigAlgorithm
    self_signature: bytes = b""

    def tbs_bytes(self) -> bytes:
        return (Writer().raw(CSR_MAGIC).text(self.subject).blob(self.public_key)
                .u8(self.sig_algorithm).getvalue())

    def to_bytes(self) -> bytes:
        return Writer().raw(self.tbs_bytes()).blob(self.self_signature).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CSR":
        r = Reader(data)
        if r.fixed(8) != CSR_MAGIC:
            raise MalformedData("not a CSR")
        subject, pk = r.text(), r.blob()
        try:
            sig_alg = SigAlgorithm(r.u8())
        except ValueError as exc:
            raise MalformedData("unknown signature algorithm") from exc
        sig = r.blob()
        r.end()
        return cls(subject, pk, sig_alg, sig)

    def proof_of_possession(self) -> bool:
        return crypto.verify_signature(self.public_key, self.tbs_bytes(), self.self_signature,
                                       self.sig_algorithm)

    def armor(self) -> str:
        return armor(self.to_bytes(), "BLINDCSR")

    @classmethod
    def from_armor(cls, text: str) -> "CSR":
        return cls.from_bytes(dearmor(text, "BLINDCSR"))


def armor(data: bytes, label: str) -> str:
    body = "\n".join(textwrap.wrap(base64.b64encode(data).decode(), 64))
    return f"-----BEGIN {label}-----\n{body}\n-----END {label}-----\n"


def dearmor(text: str, label: str) -> bytes:
    begin, end = f"-----BEGIN {label}-----", f"-----END {label}-----"
    start = text.find(begin)
    stop = text.find(end, start + 1)
    if start < 0 or stop < 0:
        raise MalformedData(f"no {label} block found")
    body = "".join(text[start + len(begin):stop].split())
    try:
        return base64.b64decode(body, validate=True)
    except ValueError as exc:
        raise MalformedData(f"bad base64 in {label} block") from exc


class CertReason(str, enum.Enum):
    OK = "OK"
    SIGNATURE = "SIGNATURE"
    ISSUER_MISMATCH = "ISSUER_MISMATCH"
    EXPIRED = "EXPIRED"
    REVOKED = "REVOKED"
    UNTRUSTED_ROOT = "UNTRUSTED_ROOT"
    EMPTY_CHAIN = "EMPTY_CHAIN"


@dataclass(frozen=True)
class CertVerdict:
    reason: CertReason
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.reason is CertReason.OK

    def __bool__(self) -> bool:
        return self.ok


def verify_cert(child: BlindCert, parent: BlindCert, now: float | None = None) -> CertVerdict:
    """Is ``child`` a currently valid certificate issued by ``parent``?"""
    if not crypto.verify_signature(parent.subject_public_key, child.tbs_bytes(),
                                   child.signature, child.sig_algorithm):
        return CertVerdict(CertReason.SIGNATURE, f"{child.subject!r} not signed by {parent.subject!r} key")
    if child.issuer != parent.subject:
        return CertVerdict(CertReason.ISSUER_MISMATCH, f"issuer {child.issuer!r} != {parent.subject!r}")
    t = _now(now)
    if not child.not_before <= t <= child.not_after:
        return CertVerdict(CertReason.EXPIRED, f"{child.subject!r} not valid at {t}")
    return CertVerdict(CertReason.OK)


def verify_chain(chain: list[BlindCert], trusted_roots: Iterable[BlindCert],
                 now: float | None = None, revoked: Iterable[bytes] = ()) -> CertVerdict:
    """Walk ``chain`` (leaf first) up to a trusted self-signed root.

    If the last element is not itself self-signed, its issuer is looked up among
    ``trusted_roots``.  Every certificate, the root included, is checked against
    the revocation set.
    """
    if not chain:
        return CertVerdict(CertReason.EMPTY_CHAIN)
    roots = list(trusted_roots)
    revoked = {bytes(s) for s in revoked}
    path = list(chain)
    last = path[-1]
    if not (last.is_self_issued and verify_cert(last, last, now)):
        issuer = next((r for r in roots if r.subject == last.issuer), None)
        if issuer is None:
            return CertVerdict(CertReason.UNTRUSTED_ROOT, f"no trusted issuer {last.issuer!r}")
        path.append(issuer)
    root = path[-1]
    if not any(root.to_bytes() == r.to_bytes() for r in roots):
        return CertVerdict(CertReason.UNTRUSTED_ROOT, f"root {root.subject!r} not trusted")
    for cert in path:
        if cert.serial in revoked:
            return CertVerdict(CertReason.REVOKED, f"{cert.subject!r} serial {cert.serial.hex()} revoked")
    for child, parent in zip(path, path[1:] + [root]):
        verdict = verify_cert(child, parent, now)
        if not verdict:
            return verdict
    return CertVerdict(CertReason.OK)


def load_revocation_list(path: str | os.PathLike) -> set[bytes]:
    """One hex serial per line; blank lines and ``#`` comments ignored."""
    serials = set()
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            serials.add(bytes.fromhex(line))
    return serials


def make_cert(subject: str, issuer: str, public_key: bytes, sig_algorithm: SigAlgorithm,
              signer: Callable[[bytes], bytes], validity: int = LEAF_VALIDITY,
              not_before: float | None = None, extensions: Mapping[str, bytes] | None = None,
              serial: bytes | None = None) -> BlindCert:
    start = _now(not_before)
    if validity <= 0:
        raise ValueError("validity period must be non-empty")
    draft = BlindCert(serial or os.urandom(16), subject, issuer, start, start + validity,
                      public_key, sig_algorithm, dict(extensions or {}))
    return replace(draft, signature=signer(draft.tbs_bytes()))


def _sig_algorithm_of(spki: bytes) -> SigAlgorithm:
    return crypto.sig_algorithm_for(crypto.load_public(spki))


def _issuer_handle(token: "Token", cert: BlindCert) -> int:
    handle = token.find_handle(cert.subject_public_key)
    if handle is None:
        raise AuthFailure(f"vault holds no private key for {cert.subject!r}")
    return handle


def gen_csr(token: "Token", subject: str, pin: str, algorithm: KeyAlgorithm = KeyAlgorithm.RSA2048,
            quote_type: "QuoteType | None" = None) -> tuple[CSR, int, "Quote"]:
    """Generate a key pair in the vault and a CSR signed by it.

    The returned quote binds the CSR public key.
    """
    handle, public_key, quote = token.generate_keypair(algorithm, f"csr:{subject}", pin,
                                                       quote_type=quote_type)
    draft = CSR(subject, public_key, _sig_algorithm_of(public_key))
    csr = replace(draft, self_signature=token.sign(handle, draft.tbs_bytes(), pin))
    return csr, handle, quote


def issue_cert(csr: CSR, issuer_cert: BlindCert, issuer_token: "Token", pin: str,
               validity: int = LEAF_VALIDITY, now: float | None = None,
               extensions: Mapping[str, bytes] | None = None) -> BlindCert:
    if not csr.proof_of_possession():
        raise BadCSR(f"self-signature on CSR for {csr.subject!r} does not verify")
    handle = _issuer_handle(issuer_token, issuer_cert)
    return make_cert(csr.subject, issuer_cert.subject, csr.public_key,
                     _sig_algorithm_of(issuer_cert.subject_public_key),
                     lambda tbs: issuer_token.sign(handle, tbs, pin),
                     validity=validity, not_before=now, extensions=extensions)


def self_sign(subject: str, token: "Token", pin: str, embed_quote: bool = True,
              algorithm: KeyAlgorithm = KeyAlgorithm.RSA2048, validity: int = CA_VALIDITY,
              quote_type: "QuoteType | None" = None, now: float | None = None) -> BlindCert:
    handle, public_key, quote = token.generate_keypair(algorithm, f"ca:{subject}", pin,
                                                       quote_type=quote_type, attest=embed_quote)
    extensions = {QUOTE_EXTENSION: quote.to_bytes()} if embed_quote else {}
    cert = make_cert(subject, subject, public_key, _sig_algorithm_of(public_key),
                     lambda tbs: token.sign(handle, tbs, pin),
                     validity=validity, not_before=now, extensions=extensions)
    token.attach_cert(handle, cert.to_bytes(), pin)
    return cert


def refresh_quote(cert: BlindCert, token: "Token", pin: str,
                  quote_type: "QuoteType | None" = None) -> BlindCert:
    """Re-issue a self-signed cert with a quote from the current enclave/TCB.

    Needed after an enclave upgrade or TCB update so verifiers enforcing a
    minimum SVN keep accepting the certificate.  The key pair is unchanged.
    """
    handle = _issuer_handle(token, cert)
    quote = token.quote_public(handle, pin, quote_type=quote_type)
    extensions = dict(cert.extensions)
    extensions[QUOTE_EXTENSION] = quote.to_bytes()
    fresh = make_cert(cert.subject, cert.issuer, cert.subject_public_key, cert.sig_algorithm,
                      lambda tbs: token.sign(handle, tbs, pin),
                      validity=cert.not_after - cert.not_before, extensions=extensions)
    token.attach_cert(handle, fresh.to_bytes(), pin)
    return fresh


def inspect_cert_quote(cert: BlindCert, expected_mrenclave, anchors: "TrustAnchors",
                       min_svn: int = 0, min_tcb: int = 0,
                       quote_type: "QuoteType | None" = None) -> "QuoteVerdict":
    """Check that the embedded quote attests this certificate's key.

    The quote must come from an expected enclave build and its report_data must
    bind exactly ``cert.subject_public_key``.
    """
    from . import attestation

    raw = cert.quote_bytes()
    if raw is None:
        raise MissingQuoteExtension(f"{cert.subject!r} has no {QUOTE_EXTENSION} extension")
    try:
        quote = attestation.Quote.from_bytes(raw)
    except MalformedData as exc:
        return attestation.QuoteVerdict.malformed(str(exc))
    return attestation.verify_quote(quote, cert.subject_public_key,
                                    quote_type or quote.quote_type, anchors,
                                    expected_mrenclave=expected_mrenclave,
                                    min_svn=min_svn, min_tcb=min_tcb)
