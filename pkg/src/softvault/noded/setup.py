"""Creating node state directories.

Layout of a vault node directory::

    platform.secret   simulated fuse key of this platform (0600)
    qe.sealed         quoting enclave credentials, sealed to the QE signer
    vault.sealed      the vault (plus .counter / .journal / .lock next to it)
    node.conf         daemon configuration

A verification-service directory holds ``ias.state`` sealed to its own
platform, and ``ias.pub`` with the report-signing public key in hex.  A PCK
cache directory holds ``pck_cache.bin``.
"""

from __future__ import annotations

import os
from pathlib import Path

from ..attestation import Manufacturer, PckCache, PckCacheEntry, QuotingEnclave, VerificationService
from ..errors import BadConfig
from ..keyvault import Token
from ..soft_tee import Enclave, PlatformSecret, SealedBlob, default_enclave_image, measure_enclave

PLATFORM_FILE = "platform.secret"
QE_FILE = "qe.sealed"
VAULT_FILE = "vault.sealed"
CONFIG_FILE = "node.conf"
IAS_STATE = "ias.state"
IAS_PUBLIC = "ias.pub"
PCK_CACHE_FILE = "pck_cache.bin"
CA_CERT = "ca.cert"
NODE_CERT = "node.cert"


def node_enclave(platform: PlatformSecret, image: Path | None = None, svn: int = 1,
                 tcb_version: int = 1) -> Enclave:
    data = Path(image).read_bytes() if image else default_enclave_image()
    return Enclave(platform, measure_enclave(data, svn=svn, tcb_version=tcb_version))


def _fresh_dir(state_dir: Path) -> Path:
    d = Path(state_dir)
    d.mkdir(parents=True, exist_ok=True)
    os.chmod(d, 0o700)
    if (d / PLATFORM_FILE).exists():
        raise BadConfig(f"{d} already holds a platform; refusing to overwrite it")
    return d


def init_vault_node(state_dir, pin: str, manufacturer: Manufacturer,
                    ias: VerificationService | None = None, *, enclave_image: Path | None = None,
                    enclave_svn: int = 1, tcb_version: int = 1,
                    pin_delay: float = 1.0) -> tuple[Enclave, QuotingEnclave, Token]:
    """Provision a fresh platform: secret, QE credentials (EPID if ``ias`` given), vault."""
    from ..attestation import make_quoter

    d = _fresh_dir(state_dir)
    platform = PlatformSecret.generate()
    platform.save(d / PLATFORM_FILE)
    epid = ias.enroll(platform.platform_id) if ias is not None else None
    qe = QuotingEnclave(platform, epid=epid, pck_cert=manufacturer.issue_pck_cert(platform))
    qe.save(d / QE_FILE)
    enclave = node_enclave(platform, enclave_image, enclave_svn, tcb_version)
    token = Token.init(d / VAULT_FILE, pin, enclave, quoter=make_quoter(enclave, qe),
                       pin_delay=pin_delay)
    return enclave, qe, token


def init_ias_node(state_dir, service: VerificationService | None = None) -> VerificationService:
    d = _fresh_dir(state_dir)
    platform = PlatformSecret.generate()
    platform.save(d / PLATFORM_FILE)
    service = service or VerificationService.create()
    save_ias_state(d, service)
    (d / IAS_PUBLIC).write_text(service.public_key.hex() + "\n")
    return service


def _ias_enclave(d: Path) -> Enclave:
    return Enclave.default(PlatformSecret.load(d / PLATFORM_FILE))


def save_ias_state(state_dir, service: VerificationService) -> None:
    d = Path(state_dir)
    blob = _ias_enclave(d).seal(service.to_bytes())
    tmp = d / (IAS_STATE + ".tmp")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as f:
        f.write(blob.to_bytes())
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, d / IAS_STATE)


def load_ias_state(state_dir) -> VerificationService:
    d = Path(state_dir)
    blob = SealedBlob.from_bytes((d / IAS_STATE).read_bytes())
    return VerificationService.from_bytes(_ias_enclave(d).unseal(blob))


def init_pck_cache_node(state_dir, entries: list[PckCacheEntry] = ()) -> PckCache:
    d = Path(state_dir)
    d.mkdir(parents=True, exist_ok=True)
    cache = PckCache.load(d / PCK_CACHE_FILE)
    cache.put(entries)
    cache.save(d / PCK_CACHE_FILE)
    return cache
