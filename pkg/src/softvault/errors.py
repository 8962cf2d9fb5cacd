"""Exception hierarchy shared by every layer.

Each error carries a stable ``code`` (sent on the wire inside ERROR frames) and
an ``exit_code`` used by the CLI and daemon.  ``error_for_code`` maps a wire code
back to its class so a remote abort re-raises locally with the same type.
"""

from __future__ import annotations

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_USAGE = 2
EXIT_AUTH = 3
EXIT_ATTESTATION = 4
EXIT_CERT = 5
EXIT_PCK_REJECTED = 6
EXIT_LOG_INTEGRITY = 7
EXIT_UNAVAILABLE = 8
EXIT_PROTOCOL = 9


class VaultError(Exception):
    code = "VaultError"
    exit_code = EXIT_GENERIC

    def __init__(self, detail: str = "", *, remote: bool = False):
        super().__init__(detail or self.code)
        self.detail = detail
        self.remote = remote

    def __str__(self) -> str:
        base = f"{self.code}: {self.detail}" if self.detail else self.code
        return f"{base} (reported by peer)" if self.remote else base


# --- soft_tee --------------------------------------------------------------

class InvalidImage(VaultError):
    code = "InvalidImage"


class InvalidReportData(VaultError):
    code = "InvalidReportData"


class InvalidReport(VaultError):
    code = "InvalidReport"
    exit_code = EXIT_ATTESTATION


class SealError(VaultError):
    code = "SealError"


class SealIdentityMismatch(SealError):
    code = "SealIdentityMismatch"


class SealPlatformMismatch(SealError):
    code = "SealPlatformMismatch"


class SealIntegrityError(SealError):
    code = "SealIntegrityError"


# --- attestation -----------------------------------------------------------

class PckUnavailable(VaultError):
    code = "PckUnavailable"
    exit_code = EXIT_ATTESTATION


class EpidNotEnrolled(VaultError):
    code = "EpidNotEnrolled"
    exit_code = EXIT_ATTESTATION


class VerificationServiceRequired(VaultError):
    code = "VerificationServiceRequired"
    exit_code = EXIT_ATTESTATION


class WrongQuoteType(VaultError):
    code = "WrongQuoteType"
    exit_code = EXIT_ATTESTATION


class OrgSignatureInvalid(VaultError):
    code = "OrgSignatureInvalid"
    exit_code = EXIT_PCK_REJECTED


class NotFound(VaultError):
    code = "NotFound"


class MalformedData(VaultError):
    code = "MalformedData"
    exit_code = EXIT_PROTOCOL


# --- keyvault --------------------------------------------------------------

class AlreadyInitialized(VaultError):
    code = "AlreadyInitialized"
    exit_code = EXIT_USAGE


class AuthFailure(VaultError):
    code = "AuthFailure"
    exit_code = EXIT_AUTH


class UnsupportedAlgorithm(VaultError):
    code = "UnsupportedAlgorithm"
    exit_code = EXIT_USAGE


class UnknownHandle(VaultError):
    code = "UnknownHandle"


class WrongKeyType(VaultError):
    code = "WrongKeyType"


class NonExtractable(VaultError):
    code = "NonExtractable"


class ReservedMessage(VaultError):
    code = "ReservedMessage"


class CounterWriteFailure(VaultError):
    code = "CounterWriteFailure"
    exit_code = EXIT_LOG_INTEGRITY


class LogIntegrityError(VaultError):
    code = "LogIntegrityError"
    exit_code = EXIT_LOG_INTEGRITY


class RollbackDetected(LogIntegrityError):
    code = "RollbackDetected"


class ChainCorrupted(LogIntegrityError):
    code = "ChainCorrupted"


class IncompleteOperation(LogIntegrityError):
    code = "IncompleteOperation"


class VaultLocked(VaultError):
    code = "VaultLocked"
    exit_code = EXIT_AUTH


# --- certkit ---------------------------------------------------------------

class BadCSR(VaultError):
    code = "BadCSR"
    exit_code = EXIT_CERT


class MissingQuoteExtension(VaultError):
    code = "MissingQuoteExtension"
    exit_code = EXIT_ATTESTATION


# --- protocols -------------------------------------------------------------

class ProtocolAbort(VaultError):
    """A verification step failed and the running protocol was abandoned."""

    code = "ProtocolAbort"
    exit_code = EXIT_PROTOCOL

    def __init__(self, detail: str = "", *, step: str = "", remote: bool = False):
        super().__init__(detail, remote=remote)
        self.step = step

    def __str__(self) -> str:
        text = super().__str__()
        return f"[{self.step}] {text}" if self.step else text


class InvalidCurvePoint(ProtocolAbort):
    code = "InvalidCurvePoint"


class CAQuoteInvalid(ProtocolAbort):
    code = "CAQuoteInvalid"
    exit_code = EXIT_ATTESTATION


class IASRejected(ProtocolAbort):
    code = "IASRejected"
    exit_code = EXIT_ATTESTATION


class CertIssuerMismatch(ProtocolAbort):
    code = "CertIssuerMismatch"
    exit_code = EXIT_CERT


class QuoteInvalid(ProtocolAbort):
    code = "QuoteInvalid"
    exit_code = EXIT_ATTESTATION


class PeerQuoteInvalid(ProtocolAbort):
    code = "PeerQuoteInvalid"
    exit_code = EXIT_ATTESTATION


class PeerSignatureInvalid(ProtocolAbort):
    code = "PeerSignatureInvalid"
    exit_code = EXIT_ATTESTATION


class PeerCertUntrusted(ProtocolAbort):
    code = "PeerCertUntrusted"
    exit_code = EXIT_CERT


class DecryptFailure(ProtocolAbort):
    code = "DecryptFailure"


class PckRejected(ProtocolAbort):
    code = "PckRejected"
    exit_code = EXIT_PCK_REJECTED


class OutOfOrder(ProtocolAbort):
    code = "OutOfOrder"


# --- noded -----------------------------------------------------------------

class BadConfig(VaultError):
    code = "BadConfig"
    exit_code = EXIT_USAGE


class UnsupportedForRole(VaultError):
    code = "UnsupportedForRole"
    exit_code = EXIT_PROTOCOL


class UnknownSession(VaultError):
    code = "UnknownSession"
    exit_code = EXIT_PROTOCOL


class FrameError(VaultError):
    code = "FrameError"
    exit_code = EXIT_PROTOCOL


class FrameTooLarge(FrameError):
    code = "FrameTooLarge"


class Unavailable(VaultError):
    code = "Unavailable"
    exit_code = EXIT_UNAVAILABLE


def _all_subclasses(cls: type) -> list[type]:
    out = []
    for sub in cls.__subclasses__():
        out.append(sub)
        out.extend(_all_subclasses(sub))
    return out


_BY_CODE = {cls.code: cls for cls in [VaultError, *_all_subclasses(VaultError)]}


def error_for_code(code: str, detail: str = "") -> VaultError:
    """Rebuild the exception a peer reported in an ERROR frame."""
    cls = _BY_CODE.get(code, VaultError)
    return cls(detail, remote=True)
