"""Client stubs for talking to other nodes."""

from __future__ import annotations

import json
import socket
from pathlib import Path

from ..attestation import AttestationVerificationReport, PckCacheEntry, Quote
from ..certkit import BlindCert
from ..errors import MalformedData, NotFound, Unavailable
from ..protocols.channel import SocketChannel, Session
from ..protocols.messages import MsgType
from .config import Address


def connect(addr: Address, timeout: float = 10.0, capture: list | None = None) -> SocketChannel:
    return SocketChannel.connect(addr[0], addr[1], timeout=timeout, capture=capture)


class RemoteIas:
    """Verification-service client usable as ``TrustAnchors.ias``."""

    def __init__(self, addr: Address, timeout: float = 30.0):
        self.addr = addr
        self.timeout = timeout

    def verify(self, q: Quote) -> AttestationVerificationReport:
        ch = connect(self.addr, self.timeout)
        try:
            s = Session(ch, name="ias_verify")
            s.send(MsgType.IAS_VERIFY, 1, quote=q.to_bytes())
            return AttestationVerificationReport.from_bytes(
                s.expect(MsgType.IAS_REPORT, 1, timeout=self.timeout)["avr"])
        except ConnectionError as exc:
            raise Unavailable(f"verification service dropped the connection: {exc}") from None
        finally:
            ch.close()


class RemotePckCache:
    """PCK cache client usable wherever a local ``PckCache`` is."""

    def __init__(self, addr: Address, timeout: float = 30.0):
        self.addr = addr
        self.timeout = timeout

    def lookup(self, platform_id: bytes) -> PckCacheEntry | None:
        ch = connect(self.addr, self.timeout)
        try:
            s = Session(ch, name="pck_fetch")
            s.send(MsgType.PCK_FETCH, 1, platform_id=platform_id)
            raw = s.expect(MsgType.PCK_ENTRY, 1, timeout=self.timeout)["entry"]
        except NotFound:
            return None
        except ConnectionError as exc:
            raise Unavailable(f"PCK cache dropped the connection: {exc}") from None
        finally:
            ch.close()
        try:
            return PckCacheEntry.from_bytes(raw)
        except MalformedData:
            return None


def cert_fetch(addr: Address, timeout: float = 30.0) -> BlindCert:
    """Fetch the current certificate of a CA node."""
    from ..protocols.issuance import fetch_ca_cert
    ch = connect(addr, timeout)
    try:
        return fetch_ca_cert(ch)
    except ConnectionError as exc:
        raise Unavailable(f"CA dropped the connection: {exc}") from None
    finally:
        ch.close()


def control(socket_path: str | Path, command: str, args: dict | None = None,
            timeout: float = 300.0) -> dict:
    """Send one command to a running node over its local control socket."""
    sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    sock.settimeout(timeout)
    try:
        sock.connect(str(socket_path))
    except OSError as exc:
        sock.close()
        raise Unavailable(f"no node listening on {socket_path}: {exc}") from None
    ch = SocketChannel(sock)
    try:
        s = Session(ch, name="control")
        s.send(MsgType.CONTROL, 1, command=command, args=json.dumps(args or {}))
        return json.loads(s.expect(MsgType.CONTROL_RESULT, 1, timeout=timeout)["result"])
    except ConnectionError as exc:
        raise Unavailable(f"node closed the control connection: {exc}") from None
    finally:
        ch.close()
