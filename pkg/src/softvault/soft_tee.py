"""Software stand-in for the enclave primitives: measurement, reports, sealing.

The platform secret file plays the role of the CPU fuses.  Every key the
emulated hardware hands out (report MAC key, seal keys, the PCK signing key)
is derived from it with a distinct HKDF label, so no key can be used in
another's place.
"""

from __future__ import annotations

import enum
import hmac
import os
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from cryptography.exceptions import InvalidTag

from . import crypto
from .encoding import Reader, Writer, sha256
from .errors import (
    InvalidImage,
    InvalidReportData,
    MalformedData,
    SealIdentityMismatch,
    SealIntegrityError,
    SealPlatformMismatch,
)

PLATFORM_ID_SIZE = 16
SECRET_SIZE = 32
REPORT_DATA_SIZE = 64
MEASUREMENT_SIZE = 32 + 32 + 2 + 2
REPORT_SIZE = MEASUREMENT_SIZE + REPORT_DATA_SIZE + PLATFORM_ID_SIZE + 32

PLATFORM_MAGIC = b"BFPLAT01"
SEAL_MAGIC = b"BFSEAL01"

DEFAULT_SIGNER = b"softvault release signing authority"

# Modules whose bytes make up the vault "enclave image".
TRUSTED_MODULES = ("encoding.py", "crypto.py", "errors.py", "keyvault.py")

_LABEL_REPORT = b"softvault/report-key"
_LABEL_PCK = b"softvault/pck"
_LABEL_EGETKEY = b"softvault/egetkey/"


@dataclass(frozen=True)
class PlatformSecret:
    platform_id: bytes
    root_secret: bytes = field(repr=False)
    provisioning_secret: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.platform_id) != PLATFORM_ID_SIZE:
            raise ValueError("platform_id must be 16 bytes")
        if len(self.root_secret) != SECRET_SIZE or len(self.provisioning_secret) != SECRET_SIZE:
            raise ValueError("platform secrets must be 32 bytes")

    @classmethod
    def generate(cls) -> "PlatformSecret":
        return cls(os.urandom(PLATFORM_ID_SIZE), os.urandom(SECRET_SIZE), os.urandom(SECRET_SIZE))

    def to_bytes(self) -> bytes:
        return PLATFORM_MAGIC + self.platform_id + self.root_secret + self.provisioning_secret

    @classmethod
    def from_bytes(cls, data: bytes) -> "PlatformSecret":
        if len(data) != 8 + PLATFORM_ID_SIZE + 2 * SECRET_SIZE or data[:8] != PLATFORM_MAGIC:
            raise MalformedData("not a platform secret file")
        p = 8
        return cls(data[p:p + 16], data[p + 16:p + 48], data[p + 48:p + 80])

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "wb") as f:
            f.write(self.to_bytes())
            f.flush()
            os.fsync(f.fileno())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PlatformSecret":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def load_or_create(cls, path: str | os.PathLike) -> "PlatformSecret":
        if Path(path).exists():
            return cls.load(path)
        secret = cls.generate()
        secret.save(path)
        return secret


@dataclass(frozen=True)
class Measurement:
    mrenclave: bytes
    mrsigner: bytes
    svn: int = 1
    tcb_version: int = 1

    def to_bytes(self) -> bytes:
        return self.mrenclave + self.mrsigner + struct.pack(">HH", self.svn, self.tcb_version)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Measurement":
        if len(data) != MEASUREMENT_SIZE:
            raise MalformedData("bad measurement length")
        svn, tcb = struct.unpack(">HH", data[64:68])
        return cls(data[:32], data[32:64], svn, tcb)


def measure_enclave(image: bytes, signer: bytes = DEFAULT_SIGNER,
                    svn: int = 1, tcb_version: int = 1) -> Measurement:
    """Identity of an enclave build: SHA-256 of the image and of the signing authority."""
    if not image:
        raise InvalidImage("enclave image is empty")
    if not (0 <= svn <= 0xFFFF and 0 <= tcb_version <= 0xFFFF):
        raise ValueError("svn and tcb_version are unsigned 16-bit values")
    return Measurement(sha256(bytes(image)), sha256(bytes(signer)), svn, tcb_version)


def default_enclave_image() -> bytes:
    """The source bytes of the vault's trusted modules, in a fixed order."""
    pkg = resources.files(__package__)
    w = Writer()
    for name in TRUSTED_MODULES:
        w.text(name).blob(pkg.joinpath(name).read_bytes())
    return w.getvalue()


@dataclass(frozen=True)
class Report:
    measurement: Measurement
    report_data: bytes
    platform_id: bytes
    mac: bytes

    def body(self) -> bytes:
        return self.measurement.to_bytes() + self.report_data + self.platform_id

    def to_bytes(self) -> bytes:
        return self.body() + self.mac

    @classmethod
    def from_bytes(cls, data: bytes) -> "Report":
        if len(data) != REPORT_SIZE:
            raise MalformedData("bad report length")
        m = Measurement.from_bytes(data[:MEASUREMENT_SIZE])
        p = MEASUREMENT_SIZE
        return cls(m, data[p:p + 64], data[p + 64:p + 80], data[p + 80:])


def _report_key(platform: PlatformSecret) -> bytes:
    return crypto.hkdf(platform.root_secret, _LABEL_REPORT)


def create_report(report_data: bytes, platform: PlatformSecret, meas: Measurement) -> Report:
    if len(report_data) != REPORT_DATA_SIZE:
        raise InvalidReportData(f"report_data must be 64 bytes, got {len(report_data)}")
    unsigned = Report(meas, bytes(report_data), platform.platform_id, b"")
    mac = hmac.new(_report_key(platform), unsigned.body(), "sha256").digest()
    return Report(meas, bytes(report_data), platform.platform_id, mac)


def verify_report(r: Report, platform: PlatformSecret) -> bool:
    if r.platform_id != platform.platform_id:
        return False
    expected = hmac.new(_report_key(platform), r.body(), "sha256").digest()
    return hmac.compare_digest(expected, r.mac)


class SealPolicy(enum.IntEnum):
    MRENCLAVE = 1
    MRSIGNER = 2


def _identity_for(policy: SealPolicy, meas: Measurement) -> bytes:
    return meas.mrenclave if policy is SealPolicy.MRENCLAVE else meas.mrsigner


def derive_key(platform: PlatformSecret, meas: Measurement, purpose: str,
               policy: SealPolicy = SealPolicy.MRENCLAVE) -> bytes:
    """EGETKEY analogue: a 32-byte key unique to (platform, identity, purpose)."""
    info = (_LABEL_EGETKEY + purpose.encode() + b"\x00" + bytes([policy])
            + _identity_for(policy, meas))
    return crypto.hkdf(platform.root_secret, info)


@dataclass(frozen=True)
class SealedBlob:
    policy: SealPolicy
    bound_identity: bytes
    platform_id: bytes
    nonce: bytes
    ciphertext: bytes  # includes the 16-byte GCM tag

    def header(self) -> bytes:
        return (SEAL_MAGIC + bytes([self.policy]) + self.bound_identity + self.platform_id
                + self.nonce + struct.pack(">I", len(self.ciphertext)))

    def to_bytes(self) -> bytes:
        return self.header() + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedBlob":
        r = Reader(data)
        if r.fixed(8) != SEAL_MAGIC:
            raise MalformedData("bad sealed blob magic")
        try:
            policy = SealPolicy(r.u8())
        except ValueError as exc:
            raise MalformedData("unknown seal policy") from exc
        identity = r.fixed(32)
        platform_id = r.fixed(PLATFORM_ID_SIZE)
        nonce = r.fixed(crypto.NONCE_SIZE)
        ciphertext = r.fixed(r.u32())
        r.end()
        return cls(policy, identity, platform_id, nonce, ciphertext)


def seal(plaintext: bytes, policy: SealPolicy, platform: PlatformSecret,
         meas: Measurement) -> SealedBlob:
    if not plaintext:
        raise ValueError("nothing to seal")
    policy = SealPolicy(policy)
    nonce = os.urandom(crypto.NONCE_SIZE)
    identity = _identity_for(policy, meas)
    ct_len = len(plaintext) + 16
    draft = SealedBlob(policy, identity, platform.platform_id, nonce, b"\x00" * ct_len)
    key = derive_key(platform, meas, "seal", policy)
    blob = crypto.aead_encrypt(key, bytes(plaintext), draft.header(), nonce=nonce)
    return SealedBlob(policy, identity, platform.platform_id, nonce, blob[crypto.NONCE_SIZE:])


def unseal(blob: SealedBlob, platform: PlatformSecret, meas: Measurement) -> bytes:
    if blob.platform_id != platform.platform_id:
        raise SealPlatformMismatch("blob was sealed on another platform")
    if blob.bound_identity != _identity_for(blob.policy, meas):
        raise SealIdentityMismatch(f"blob is bound to a different {blob.policy.name}")
    key = derive_key(platform, meas, "seal", blob.policy)
    try:
        return crypto.aead_decrypt(key, blob.nonce + blob.ciphertext, blob.header())
    except InvalidTag:
        raise SealIntegrityError("sealed blob failed authentication") from None


def pck_public_key(platform: PlatformSecret) -> bytes:
    return crypto.public_bytes(_pck_private(platform))


def pck_sign(platform: PlatformSecret, payload: bytes) -> bytes:
    """Sign with the platform's Provisioning Certification Key (PCE role)."""
    return crypto.sign_with(_pck_private(platform), payload)


def _pck_private(platform: PlatformSecret):
    seed = crypto.hkdf(platform.provisioning_secret, _LABEL_PCK, length=48)
    return crypto.ec_private_from_seed(seed)


class Enclave:
    """A running enclave instance: one measurement on one platform."""

    def __init__(self, platform: PlatformSecret, measurement: Measurement):
        self.platform = platform
        self.measurement = measurement

    @classmethod
    def default(cls, platform: PlatformSecret, svn: int = 1, tcb_version: int = 1) -> "Enclave":
        return cls(platform, measure_enclave(default_enclave_image(), svn=svn, tcb_version=tcb_version))

    @property
    def platform_id(self) -> bytes:
        return self.platform.platform_id

    def report(self, report_data: bytes) -> Report:
        return create_report(report_data, self.platform, self.measurement)

    def seal(self, plaintext: bytes, policy: SealPolicy = SealPolicy.MRENCLAVE) -> SealedBlob:
        return seal(plaintext, policy, self.platform, self.measurement)

    def unseal(self, blob: SealedBlob) -> bytes:
        return unseal(blob, self.platform, self.measurement)

    def derive_key(self, purpose: str, policy: SealPolicy = SealPolicy.MRENCLAVE) -> bytes:
        return derive_key(self.platform, self.measurement, purpose, policy)

    def __repr__(self) -> str:
        return (f"Enclave(platform={self.platform.platform_id.hex()}, "
                f"mrenclave={self.measurement.mrenclave.hex()[:16]}, svn={self.measurement.svn})")
