"""Thin wrappers over ``cryptography`` for the primitives the vault needs.

Public keys travel as DER SubjectPublicKeyInfo bytes everywhere; that is the
"canonical public-key bytes" form bound into quotes and certificates.
"""

from __future__ import annotations

import enum
import os

from cryptography.exceptions import InvalidSignature, InvalidTag, UnsupportedAlgorithm
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec, padding, rsa
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import InvalidCurvePoint, MalformedData

P256_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
NONCE_SIZE = 12


class KeyAlgorithm(enum.IntEnum):
    RSA2048 = 1
    ECDSA_P256 = 2
    ECDH_P256 = 3
    SECRET = 4  # volatile symmetric session key, never persisted

    @classmethod
    def parse(cls, name: str) -> "KeyAlgorithm":
        key = name.strip().upper().replace("-", "_")
        aliases = {"RSA": "RSA2048", "ECDSA": "ECDSA_P256", "P256": "ECDSA_P256", "ECDH": "ECDH_P256"}
        key = aliases.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown key algorithm {name!r}") from None


class SigAlgorithm(enum.IntEnum):
    RSA_PKCS1_SHA256 = 1
    ECDSA_P256_SHA256 = 2


def generate_private(alg: KeyAlgorithm):
    if alg is KeyAlgorithm.RSA2048:
        return rsa.generate_private_key(public_exponent=65537, key_size=2048)
    if alg in (KeyAlgorithm.ECDSA_P256, KeyAlgorithm.ECDH_P256):
        return ec.generate_private_key(ec.SECP256R1())
    raise ValueError(f"cannot generate asymmetric key for {alg!r}")


def ec_private_from_seed(seed: bytes) -> ec.EllipticCurvePrivateKey:
    """Deterministic P-256 key from at least 32 bytes of uniform seed material."""
    scalar = int.from_bytes(seed, "big") % (P256_ORDER - 1) + 1
    return ec.derive_private_key(scalar, ec.SECP256R1())


def private_to_der(key) -> bytes:
    return key.private_bytes(
        serialization.Encoding.DER,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )


def private_from_der(data: bytes):
    return serialization.load_der_private_key(data, password=None)


def public_bytes(key) -> bytes:
    pub = key.public_key() if hasattr(key, "private_bytes") else key
    return pub.public_bytes(
        serialization.Encoding.DER,
        serialization.PublicFormat.SubjectPublicKeyInfo,
    )


def load_public(spki: bytes):
    try:
        return serialization.load_der_public_key(spki)
    except (ValueError, TypeError, UnsupportedAlgorithm) as exc:
        raise MalformedData(f"unparseable public key: {exc}") from exc


def load_ec_point(data: bytes) -> ec.EllipticCurvePublicKey:
    """Parse a P-256 public key given as SPKI DER or an X9.62 point."""
    try:
        if data[:1] in (b"\x02", b"\x03", b"\x04"):
            return ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), data)
        key = serialization.load_der_public_key(data)
    except (ValueError, TypeError, IndexError, UnsupportedAlgorithm) as exc:
        raise InvalidCurvePoint(f"not a valid P-256 point: {exc}") from exc
    if not isinstance(key, ec.EllipticCurvePublicKey) or not isinstance(key.curve, ec.SECP256R1):
        raise InvalidCurvePoint("public key is not on P-256")
    return key


def sig_algorithm_for(key) -> SigAlgorithm:
    if isinstance(key, (rsa.RSAPrivateKey, rsa.RSAPublicKey)):
        return SigAlgorithm.RSA_PKCS1_SHA256
    if isinstance(key, (ec.EllipticCurvePrivateKey, ec.EllipticCurvePublicKey)):
        return SigAlgorithm.ECDSA_P256_SHA256
    raise ValueError(f"no signature algorithm for {type(key).__name__}")


def sign_with(private_key, message: bytes) -> bytes:
    if isinstance(private_key, rsa.RSAPrivateKey):
        return private_key.sign(message, padding.PKCS1v15(), hashes.SHA256())
    return private_key.sign(message, ec.ECDSA(hashes.SHA256()))


def verify_signature(spki: bytes, message: bytes, signature: bytes,
                     sig_alg: SigAlgorithm | None = None) -> bool:
    try:
        key = load_public(spki)
    except MalformedData:
        return False
    try:
        expected = sig_algorithm_for(key)
    except ValueError:
        return False
    if sig_alg is not None and sig_alg != expected:
        return False
    try:
        if expected is SigAlgorithm.RSA_PKCS1_SHA256:
            key.verify(signature, message, padding.PKCS1v15(), hashes.SHA256())
        else:
            key.verify(signature, message, ec.ECDSA(hashes.SHA256()))
    except (InvalidSignature, ValueError):
        return False
    return True


def hkdf(ikm: bytes, info: bytes, salt: bytes | None = None, length: int = 32) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(ikm)


def aead_encrypt(key: bytes, plaintext: bytes, aad: bytes = b"", nonce: bytes | None = None) -> bytes:
    """AES-256-GCM; output is nonce || ciphertext || tag."""
    nonce = nonce or os.urandom(NONCE_SIZE)
    return nonce + AESGCM(key).encrypt(nonce, plaintext, aad)


def aead_decrypt(key: bytes, blob: bytes, aad: bytes = b"") -> bytes:
    """Inverse of :func:`aead_encrypt`; raises ``InvalidTag`` on any tampering."""
    if len(blob) < NONCE_SIZE + 16:
        raise InvalidTag()
    return AESGCM(key).decrypt(blob[:NONCE_SIZE], blob[NONCE_SIZE:], aad)


__all__ = [
    "InvalidTag", "KeyAlgorithm", "SigAlgorithm", "aead_decrypt", "aead_encrypt",
    "ec_private_from_seed", "generate_private", "hkdf", "load_ec_point", "load_public",
    "private_from_der", "private_to_der", "public_bytes", "sig_algorithm_for",
    "sign_with", "verify_signature",
]
