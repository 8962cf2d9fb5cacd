"""Quotes for both attestation models, the verification service, and the PCK cache.

ECDSA quotes are signed by a per-platform attestation key whose certificate is
issued by the platform's PCK, whose certificate in turn chains to the
manufacturer root.  They verify offline.

EPID quotes are simulated with a group MAC: a platform signs with a member key
derived from the group secret, and only the verification service holds that
secret.  Relying parties therefore have to ask the service, which answers with
a signed :class:`AttestationVerificationReport`.
"""

from __future__ import annotations

import enum
import hmac
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Iterable, Protocol

from cryptography.hazmat.primitives import serialization

from . import crypto, soft_tee
from .certkit import BlindCert, make_cert, verify_chain
from .crypto import SigAlgorithm
from .encoding import Reader, Writer, sha256
from .errors import (
    EpidNotEnrolled,
    InvalidReport,
    MalformedData,
    NotFound,
    OrgSignatureInvalid,
    PckUnavailable,
    VerificationServiceRequired,
    WrongQuoteType,
)
from .soft_tee import Enclave, PlatformSecret, Report, SealPolicy

QUOTE_MAGIC = b"BFQUOTE1"
AVR_MAGIC = b"BFAVR001"
PCK_ENTRY_MAGIC = b"BFPCKENT"
PCK_CACHE_MAGIC = b"BFPCKC01"

QE_IMAGE = b"softvault architectural quoting enclave v1"
QE_SIGNER = b"softvault simulated platform manufacturer"
QE_MEASUREMENT = soft_tee.measure_enclave(QE_IMAGE, signer=QE_SIGNER)

AVR_CACHE_TTL = 24 * 3600
PCK_VALIDITY = 3650 * 86400


class QuoteType(enum.IntEnum):
    EPID = 1
    ECDSA = 2

    @classmethod
    def parse(cls, name: "str | QuoteType") -> "QuoteType":
        if isinstance(name, QuoteType):
            return name
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise ValueError(f"unknown quote type {name!r}") from None


def bind_report_data(data: bytes) -> bytes:
    """report_data value binding ``data``: its SHA-256, left-padded with zeros to 64 bytes."""
    return b"\x00" * 32 + sha256(bytes(data))


def pck_subject(platform_id: bytes) -> str:
    return f"PCK {platform_id.hex()}"


def ak_subject(platform_id: bytes) -> str:
    return f"QE-AK {platform_id.hex()}"


@dataclass(frozen=True)
class Quote:
    report: Report
    quote_type: QuoteType
    signature: bytes
    pck_chain: tuple[BlindCert, ...] = ()

    def signed_body(self) -> bytes:
        return QUOTE_MAGIC + bytes([self.quote_type]) + self.report.to_bytes()

    def to_bytes(self) -> bytes:
        w = Writer().raw(self.signed_body()).blob(self.signature).u16(len(self.pck_chain))
        for cert in self.pck_chain:
            w.blob(cert.to_bytes())
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Quote":
        r = Reader(data)
        if r.fixed(8) != QUOTE_MAGIC:
            raise MalformedData("not a quote")
        try:
            qtype = QuoteType(r.u8())
        except ValueError as exc:
            raise MalformedData("unknown quote type") from exc
        report = Report.from_bytes(r.fixed(soft_tee.REPORT_SIZE))
        signature = r.blob()
        chain = tuple(BlindCert.from_bytes(r.blob()) for _ in range(r.u16()))
        r.end()
        if (qtype is QuoteType.ECDSA) != bool(chain):
            raise MalformedData("pck_chain must be present exactly for ECDSA quotes")
        return cls(report, qtype, signature, chain)

    @property
    def quote_hash(self) -> bytes:
        return sha256(self.to_bytes())

    @property
    def measurement(self) -> soft_tee.Measurement:
        return self.report.measurement


# --- quoting enclave --------------------------------------------------------

@dataclass(frozen=True)
class EpidCredential:
    group_id: bytes
    member_key: bytes = field(repr=False)

    def to_bytes(self) -> bytes:
        return self.group_id + self.member_key

    @classmethod
    def from_bytes(cls, data: bytes) -> "EpidCredential":
        if len(data) != 48:
            raise MalformedData("bad EPID credential")
        return cls(data[:16], data[16:])


def _pce_certify(platform: PlatformSecret, qe_report: Report, ak_public: bytes) -> BlindCert:
    """Provisioning Certification Enclave: certify the QE attestation key under the PCK."""
    if not soft_tee.verify_report(qe_report, platform):
        raise InvalidReport("QE report failed local attestation")
    if qe_report.measurement.mrsigner != QE_MEASUREMENT.mrsigner:
        raise InvalidReport("report does not come from an architectural enclave")
    if qe_report.report_data != bind_report_data(ak_public):
        raise InvalidReport("QE report does not bind the attestation key")
    pid = platform.platform_id
    return make_cert(ak_subject(pid), pck_subject(pid), ak_public, SigAlgorithm.ECDSA_P256_SHA256,
                     lambda tbs: soft_tee.pck_sign(platform, tbs), validity=PCK_VALIDITY)


class QuotingEnclave:
    """Turns locally verifiable reports into remotely verifiable quotes."""

    def __init__(self, platform: PlatformSecret, epid: EpidCredential | None = None,
                 pck_cert: BlindCert | None = None):
        self.platform = platform
        self.epid = epid
        self.pck_cert = pck_cert
        self._enclave = Enclave(platform, QE_MEASUREMENT)
        seed = self._enclave.derive_key("attestation-key", SealPolicy.MRSIGNER)
        self._attestation_key = crypto.ec_private_from_seed(seed)
        self._ak_cert: BlindCert | None = None
        self._lock = threading.Lock()

    def _certified_ak(self) -> BlindCert:
        with self._lock:
            if self._ak_cert is None:
                ak_public = crypto.public_bytes(self._attestation_key)
                report = self._enclave.report(bind_report_data(ak_public))
                self._ak_cert = _pce_certify(self.platform, report, ak_public)
            return self._ak_cert

    def quote(self, report: Report, quote_type: QuoteType) -> Quote:
        if not soft_tee.verify_report(report, self.platform):
            raise InvalidReport("report does not verify on this platform")
        quote_type = QuoteType(quote_type)
        if quote_type is QuoteType.EPID:
            if self.epid is None:
                raise EpidNotEnrolled("platform has no EPID member credential")
            draft = Quote(report, quote_type, b"")
            mac = hmac.new(self.epid.member_key, draft.signed_body(), "sha256").digest()
            return Quote(report, quote_type, self.epid.group_id + mac)
        if self.pck_cert is None:
            raise PckUnavailable("no PCK certificate provisioned for this platform")
        draft = Quote(report, quote_type, b"", (self._certified_ak(), self.pck_cert))
        signature = crypto.sign_with(self._attestation_key, draft.signed_body())
        return Quote(report, quote_type, signature, draft.pck_chain)

    def save(self, path: str | os.PathLike) -> None:
        w = Writer().blob(self.epid.to_bytes() if self.epid else b"")
        w.blob(self.pck_cert.to_bytes() if self.pck_cert else b"")
        blob = self._enclave.seal(w.getvalue(), SealPolicy.MRSIGNER)
        Path(path).write_bytes(blob.to_bytes())

    @classmethod
    def load(cls, platform: PlatformSecret, path: str | os.PathLike) -> "QuotingEnclave":
        enclave = Enclave(platform, QE_MEASUREMENT)
        r = Reader(enclave.unseal(soft_tee.SealedBlob.from_bytes(Path(path).read_bytes())))
        epid_raw, pck_raw = r.blob(), r.blob()
        r.end()
        return cls(platform,
                   EpidCredential.from_bytes(epid_raw) if epid_raw else None,
                   BlindCert.from_bytes(pck_raw) if pck_raw else None)


def generate_quote(report_data: bytes, quote_type: QuoteType, enclave: Enclave,
                   qe: QuotingEnclave) -> Quote:
    """Quote binding ``report_data`` (hashed per :func:`bind_report_data`) to ``enclave``."""
    report = enclave.report(bind_report_data(report_data))
    return qe.quote(report, quote_type)


def make_quoter(enclave: Enclave, qe: QuotingEnclave, default_type: QuoteType = QuoteType.EPID):
    """Callable handed to a vault token so it can attest to its own keys."""
    def quoter(data: bytes, quote_type: QuoteType | None = None) -> Quote:
        return generate_quote(data, quote_type or default_type, enclave, qe)
    quoter.default_type = default_type
    return quoter


# --- verification service (IAS role) ----------------------------------------

class AvrVerdict(enum.IntEnum):
    OK = 0
    SIGNATURE_INVALID = 1
    GROUP_REVOKED = 2


@dataclass(frozen=True)
class AttestationVerificationReport:
    quote_hash: bytes
    verdict: AvrVerdict
    issued_at: int
    service_signature: bytes = b""

    def body(self) -> bytes:
        return AVR_MAGIC + self.quote_hash + bytes([self.verdict]) + self.issued_at.to_bytes(8, "big")

    def to_bytes(self) -> bytes:
        return Writer().raw(self.body()).blob(self.service_signature).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttestationVerificationReport":
        r = Reader(data)
        if r.fixed(8) != AVR_MAGIC:
            raise MalformedData("not an attestation verification report")
        qhash = r.fixed(32)
        try:
            verdict = AvrVerdict(r.u8())
        except ValueError as exc:
            raise MalformedData("unknown verdict") from exc
        issued = r.u64()
        sig = r.blob()
        r.end()
        return cls(qhash, verdict, issued, sig)

    def verify(self, service_public_key: bytes) -> bool:
        return crypto.verify_signature(service_public_key, self.body(), self.service_signature,
                                       SigAlgorithm.ECDSA_P256_SHA256)


class VerificationService:
    """Simulated IAS: sole holder of the EPID group secret."""

    def __init__(self, group_id: bytes, group_secret: bytes, signing_key,
                 revoked: Iterable[bytes] = ()):
        self.group_id = group_id
        self._group_secret = group_secret
        self._signing_key = signing_key
        self.revoked = set(revoked)
        self._lock = threading.Lock()

    @classmethod
    def create(cls) -> "VerificationService":
        from cryptography.hazmat.primitives.asymmetric import ec
        return cls(os.urandom(16), os.urandom(32), ec.generate_private_key(ec.SECP256R1()))

    @property
    def public_key(self) -> bytes:
        return crypto.public_bytes(self._signing_key)

    def _member_key(self, platform_id: bytes) -> bytes:
        return crypto.hkdf(self._group_secret, b"softvault/epid-member" + platform_id)

    def enroll(self, platform_id: bytes) -> EpidCredential:
        """Hand a platform its member signing key (manufacturing-time provisioning)."""
        return EpidCredential(self.group_id, self._member_key(platform_id))

    def revoke(self, platform_id: bytes) -> None:
        with self._lock:
            self.revoked.add(bytes(platform_id))

    def ias_verify(self, q: Quote) -> AttestationVerificationReport:
        if q.quote_type is not QuoteType.EPID:
            raise WrongQuoteType("verification service only handles EPID quotes")
        sig = q.signature
        verdict = AvrVerdict.SIGNATURE_INVALID
        if len(sig) == 48 and hmac.compare_digest(sig[:16], self.group_id):
            key = self._member_key(q.report.platform_id)
            expected = hmac.new(key, q.signed_body(), "sha256").digest()
            if hmac.compare_digest(expected, sig[16:]):
                with self._lock:
                    revoked = q.report.platform_id in self.revoked
                verdict = AvrVerdict.GROUP_REVOKED if revoked else AvrVerdict.OK
        draft = AttestationVerificationReport(q.quote_hash, verdict, int(time.time()))
        return AttestationVerificationReport(draft.quote_hash, verdict, draft.issued_at,
                                             crypto.sign_with(self._signing_key, draft.body()))

    # the client-facing name used through TrustAnchors
    verify = ias_verify

    def to_bytes(self) -> bytes:
        w = Writer().fixed(self.group_id, 16).fixed(self._group_secret, 32)
        w.blob(crypto.private_to_der(self._signing_key))
        w.u32(len(self.revoked))
        for pid in sorted(self.revoked):
            w.blob(pid)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "VerificationService":
        r = Reader(data)
        gid, secret = r.fixed(16), r.fixed(32)
        key = crypto.private_from_der(r.blob())
        revoked = [r.blob() for _ in range(r.u32())]
        r.end()
        return cls(gid, secret, key, revoked)


class IasClient(Protocol):
    def verify(self, q: Quote) -> AttestationVerificationReport: ...


class AvrCache:
    """Per-quote cache of service verdicts (24 h by default)."""

    def __init__(self, ttl: float = AVR_CACHE_TTL, clock=time.time):
        self.ttl = ttl
        self._clock = clock
        self._items: dict[bytes, tuple[float, AttestationVerificationReport]] = {}
        self._lock = threading.Lock()

    def get(self, quote_hash: bytes) -> AttestationVerificationReport | None:
        with self._lock:
            item = self._items.get(quote_hash)
            if item is None:
                return None
            if item[0] < self._clock():
                del self._items[quote_hash]
                return None
            return item[1]

    def put(self, avr: AttestationVerificationReport) -> None:
        with self._lock:
            self._items[avr.quote_hash] = (self._clock() + self.ttl, avr)


@dataclass
class TrustAnchors:
    manufacturer_root: BlindCert | None = None
    ias: IasClient | None = None
    ias_public_key: bytes | None = None
    avr_cache: AvrCache | None = None


# --- quote verification -----------------------------------------------------

class QuoteCheck(str, enum.Enum):
    OK = "OK"
    SIGNATURE_INVALID = "SIGNATURE_INVALID"
    REPORT_DATA_MISMATCH = "REPORT_DATA_MISMATCH"
    MRENCLAVE_MISMATCH = "MRENCLAVE_MISMATCH"
    TCB_OUTDATED = "TCB_OUTDATED"


@dataclass(frozen=True)
class QuoteVerdict:
    failures: tuple[QuoteCheck, ...] = ()
    detail: str = ""

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def reason(self) -> QuoteCheck:
        return self.failures[0] if self.failures else QuoteCheck.OK

    def __bool__(self) -> bool:
        return self.ok

    @classmethod
    def malformed(cls, detail: str) -> "QuoteVerdict":
        return cls((QuoteCheck.SIGNATURE_INVALID,), f"malformed quote: {detail}")


def _check_ecdsa(q: Quote, anchors: TrustAnchors) -> str:
    """Empty string when the ECDSA signature and its PCK chain verify."""
    if anchors.manufacturer_root is None:
        return "no manufacturer root in trust anchors"
    if len(q.pck_chain) != 2:
        return "ECDSA quote must carry [attestation-key cert, PCK cert]"
    ak_cert, pck_cert = q.pck_chain
    pid = q.report.platform_id
    if pck_cert.subject != pck_subject(pid) or ak_cert.subject != ak_subject(pid):
        return "PCK chain does not belong to the quoting platform"
    chain = verify_chain([ak_cert, pck_cert], [anchors.manufacturer_root])
    if not chain:
        return f"PCK chain invalid: {chain.reason.value} {chain.detail}"
    if not crypto.verify_signature(ak_cert.subject_public_key, q.signed_body(), q.signature,
                                   SigAlgorithm.ECDSA_P256_SHA256):
        return "attestation signature does not verify"
    return ""


def _check_epid(q: Quote, anchors: TrustAnchors) -> str:
    if anchors.ias is None or anchors.ias_public_key is None:
        raise VerificationServiceRequired("EPID quotes can only be verified by the verification service")
    qhash = q.quote_hash
    avr = anchors.avr_cache.get(qhash) if anchors.avr_cache else None
    if avr is None:
        avr = anchors.ias.verify(q)
        if anchors.avr_cache is not None and avr.verify(anchors.ias_public_key):
            anchors.avr_cache.put(avr)
    if not avr.verify(anchors.ias_public_key):
        return "verification report not signed by the trusted service"
    if avr.quote_hash != qhash:
        return "verification report is for a different quote"
    if avr.verdict is not AvrVerdict.OK:
        return f"verification service verdict {avr.verdict.name}"
    return ""


def verify_quote(q: Quote, expected_report_data: bytes, quote_type: QuoteType,
                 anchors: TrustAnchors, expected_mrenclave: bytes | Collection[bytes] | None = None,
                 min_svn: int = 0, min_tcb: int = 0) -> QuoteVerdict:
    """Run the four quote checks and report every one that fails.

    1. attestation signature (offline chain for ECDSA, service verdict for EPID)
    2. report_data binds ``expected_report_data``
    3. MRENCLAVE is the expected build (skipped when ``expected_mrenclave`` is None)
    4. SVN and TCB version meet the caller's minimum

    Never raises for a bad quote; protocol layers decide whether to abort.
    """
    failures: list[QuoteCheck] = []
    notes: list[str] = []
    if q.quote_type != QuoteType(quote_type):
        problem = f"expected {QuoteType(quote_type).name} quote, got {q.quote_type.name}"
    elif q.quote_type is QuoteType.ECDSA:
        problem = _check_ecdsa(q, anchors)
    else:
        problem = _check_epid(q, anchors)
    if problem:
        failures.append(QuoteCheck.SIGNATURE_INVALID)
        notes.append(problem)
    if not hmac.compare_digest(q.report.report_data, bind_report_data(expected_report_data)):
        failures.append(QuoteCheck.REPORT_DATA_MISMATCH)
        notes.append("report_data does not bind the expected value")
    if expected_mrenclave is not None:
        allowed = {expected_mrenclave} if isinstance(expected_mrenclave, (bytes, bytearray)) \
            else {bytes(m) for m in expected_mrenclave}
        if q.measurement.mrenclave not in allowed:
            failures.append(QuoteCheck.MRENCLAVE_MISMATCH)
            notes.append(f"unexpected MRENCLAVE {q.measurement.mrenclave.hex()[:16]}")
    if q.measurement.svn < min_svn or q.measurement.tcb_version < min_tcb:
        failures.append(QuoteCheck.TCB_OUTDATED)
        notes.append(f"svn={q.measurement.svn} tcb={q.measurement.tcb_version} "
                     f"below minimum svn={min_svn} tcb={min_tcb}")
    return QuoteVerdict(tuple(failures), "; ".join(notes))


def ias_verify(q: Quote, service: VerificationService) -> AttestationVerificationReport:
    return service.ias_verify(q)


# --- organisation PCK cache -------------------------------------------------

@dataclass(frozen=True)
class PckCacheEntry:
    platform_id: bytes
    pck_cert: BlindCert
    org_signature: bytes = b""

    def signed_payload(self) -> bytes:
        return Writer().raw(PCK_ENTRY_MAGIC).fixed(self.platform_id, 16).blob(
            self.pck_cert.to_bytes()).getvalue()

    def to_bytes(self) -> bytes:
        return Writer().raw(self.signed_payload()).blob(self.org_signature).getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PckCacheEntry":
        r = Reader(data)
        if r.fixed(8) != PCK_ENTRY_MAGIC:
            raise MalformedData("not a PCK cache entry")
        pid = r.fixed(16)
        cert = BlindCert.from_bytes(r.blob())
        sig = r.blob()
        r.end()
        return cls(pid, cert, sig)


@dataclass(frozen=True)
class OrgKeys:
    """Organisation master key pair; ``msk`` is the handle of the key inside the admin vault."""

    mpk: bytes
    msk: int


def generate_org_keys(admin_token, pin: str) -> OrgKeys:
    handle, mpk, _ = admin_token.generate_keypair(crypto.KeyAlgorithm.ECDSA_P256, "org-master-key",
                                                  pin, attest=False)
    return OrgKeys(mpk, handle)


def verify_pck_entry(entry: PckCacheEntry, mpk: bytes) -> bool:
    return crypto.verify_signature(mpk, entry.signed_payload(), entry.org_signature,
                                   SigAlgorithm.ECDSA_P256_SHA256)


def sign_pck_cache(drafts: Iterable[PckCacheEntry], admin_token, pin: str,
                   mpk: bytes) -> list[PckCacheEntry]:
    handle = admin_token.find_handle(mpk)
    if handle is None:
        raise NotFound("admin vault does not hold the organisation master key")
    out = []
    for draft in drafts:
        if draft.pck_cert.subject != pck_subject(draft.platform_id):
            raise ValueError(f"PCK certificate subject does not match platform {draft.platform_id.hex()}")
        sig = admin_token.sign(handle, draft.signed_payload(), pin)
        out.append(PckCacheEntry(draft.platform_id, draft.pck_cert, sig))
    return out


class PckCache:
    """Cache server state: one entry per platform, single writer."""

    def __init__(self, entries: Iterable[PckCacheEntry] = ()):
        self._entries: dict[bytes, PckCacheEntry] = {}
        self._lock = threading.Lock()
        self.put(entries)

    def put(self, entries: Iterable[PckCacheEntry]) -> None:
        with self._lock:
            for e in entries:
                self._entries[e.platform_id] = e

    def remove(self, platform_id: bytes) -> None:
        with self._lock:
            self._entries.pop(platform_id, None)

    def lookup(self, platform_id: bytes) -> PckCacheEntry | None:
        with self._lock:
            return self._entries.get(bytes(platform_id))

    def __len__(self) -> int:
        return len(self._entries)

    def to_bytes(self) -> bytes:
        with self._lock:
            entries = [self._entries[k] for k in sorted(self._entries)]
        w = Writer().raw(PCK_CACHE_MAGIC).u32(len(entries))
        for e in entries:
            w.blob(e.to_bytes())
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "PckCache":
        r = Reader(data)
        if r.fixed(8) != PCK_CACHE_MAGIC:
            raise MalformedData("not a PCK cache file")
        entries = [PckCacheEntry.from_bytes(r.blob()) for _ in range(r.u32())]
        r.end()
        return cls(entries)

    def save(self, path: str | os.PathLike) -> None:
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PckCache":
        p = Path(path)
        return cls.from_bytes(p.read_bytes()) if p.exists() else cls()


class PckSource(Protocol):
    def lookup(self, platform_id: bytes) -> PckCacheEntry | None: ...


def fetch_pck_cert(platform_id: bytes, cache: PckSource, mpk: bytes) -> PckCacheEntry:
    """Look up a platform's PCK entry and accept it only if the organisation signed it."""
    entry = cache.lookup(platform_id)
    if entry is None or entry.platform_id != platform_id:
        raise NotFound(f"no PCK entry for platform {platform_id.hex()}")
    if not verify_pck_entry(entry, mpk):
        raise OrgSignatureInvalid(f"PCK entry for {platform_id.hex()} not signed by the organisation")
    if entry.pck_cert.subject != pck_subject(platform_id):
        raise OrgSignatureInvalid("signed PCK entry names a different platform")
    return entry


# --- manufacturer (test fixture / lab tooling) ------------------------------

class Manufacturer:
    """Holder of the simulated manufacturer root that certifies genuine PCKs."""

    def __init__(self, root_key, root_cert: BlindCert):
        self._root_key = root_key
        self.root_cert = root_cert

    @classmethod
    def create(cls, name: str = "Simulated Manufacturer Root CA") -> "Manufacturer":
        key = crypto.generate_private(crypto.KeyAlgorithm.ECDSA_P256)
        cert = make_cert(name, name, crypto.public_bytes(key), SigAlgorithm.ECDSA_P256_SHA256,
                         lambda tbs: crypto.sign_with(key, tbs), validity=2 * PCK_VALIDITY)
        return cls(key, cert)

    def issue_pck_cert(self, platform: PlatformSecret) -> BlindCert:
        return make_cert(pck_subject(platform.platform_id), self.root_cert.subject,
                         soft_tee.pck_public_key(platform), SigAlgorithm.ECDSA_P256_SHA256,
                         lambda tbs: crypto.sign_with(self._root_key, tbs), validity=PCK_VALIDITY)

    def save(self, directory: str | os.PathLike) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.root_cert.save(d / "root.cert")
        pem = self._root_key.private_bytes(serialization.Encoding.PEM,
                                           serialization.PrivateFormat.PKCS8,
                                           serialization.NoEncryption())
        fd = os.open(d / "root.key", os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "wb") as f:
            f.write(pem)

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "Manufacturer":
        d = Path(directory)
        key = serialization.load_pem_private_key((d / "root.key").read_bytes(), password=None)
        return cls(key, BlindCert.load(d / "root.cert"))
