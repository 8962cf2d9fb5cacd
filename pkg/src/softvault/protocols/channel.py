"""Message transport for protocol sessions.

Every channel moves real encoded frames, so an in-memory run and a socket run
put identical bytes on the "wire".  Channels can record those bytes in a
shared ``capture`` list for post-run inspection.
"""

from __future__ import annotations

import queue
import socket
import threading
from typing import Callable

from ..errors import (
    MalformedData,
    OutOfOrder,
    ProtocolAbort,
    Unavailable,
    VaultError,
    error_for_code,
)
from ..noded import frame as wire
from .messages import Message, MsgType, new_session_id

DEFAULT_TIMEOUT = 60.0


class Channel:
    def __init__(self, capture: list | None = None):
        self.capture = capture

    def send(self, msg: Message) -> None:
        data = wire.Frame(msg.type, msg.session_id, msg.payload()).encode()
        if self.capture is not None:
            self.capture.append(data)
        self._send_bytes(data)

    def recv(self, timeout: float | None = DEFAULT_TIMEOUT) -> Message:
        f = self._recv_frame(timeout)
        return Message.from_payload(f.type, f.session_id, f.payload)

    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self, timeout: float | None) -> wire.Frame:
        raise NotImplementedError

    def close(self) -> None:
        pass


_CLOSED = object()


class MemoryChannel(Channel):
    """One end of an in-process duplex pipe."""

    def __init__(self, capture: list | None = None):
        super().__init__(capture)
        self._inbox: queue.Queue = queue.Queue()
        self.peer: MemoryChannel | None = None

    @classmethod
    def pair(cls, capture: list | None = None) -> tuple["MemoryChannel", "MemoryChannel"]:
        a, b = cls(capture), cls(capture)
        a.peer, b.peer = b, a
        return a, b

    def _send_bytes(self, data: bytes) -> None:
        self.peer._inbox.put(data)

    def _recv_frame(self, timeout):
        try:
            data = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise Unavailable("timed out waiting for peer") from None
        if data is _CLOSED:
            raise ConnectionError("peer closed the channel")
        return wire.decode(data)

    def close(self) -> None:
        if self.peer is not None:
            self.peer._inbox.put(_CLOSED)


class SocketChannel(Channel):
    def __init__(self, sock: socket.socket, capture: list | None = None):
        super().__init__(capture)
        self.sock = sock

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 10.0,
                capture: list | None = None) -> "SocketChannel":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise Unavailable(f"cannot reach {host}:{port}: {exc}") from None
        return cls(sock, capture)

    def _send_bytes(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ConnectionError(str(exc)) from None

    def _recv_frame(self, timeout):
        self.sock.settimeout(timeout)
        try:
            return wire.read_frame(self.sock)
        except socket.timeout:
            raise Unavailable("timed out waiting for peer") from None

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class TamperChannel(Channel):
    """Wraps a channel and rewrites outgoing messages; models an active network attacker."""

    def __init__(self, inner: Channel, hook: Callable[[Message], Message]):
        super().__init__(inner.capture)
        self.inner = inner
        self.hook = hook

    def send(self, msg: Message) -> None:
        self.inner.send(self.hook(msg))

    def recv(self, timeout=DEFAULT_TIMEOUT) -> Message:
        return self.inner.recv(timeout)

    def close(self) -> None:
        self.inner.close()


class Session:
    """Step-ordered exchange over a channel with a fixed session id."""

    def __init__(self, channel: Channel, session_id: bytes | None = None, name: str = ""):
        self.channel = channel
        self.session_id = session_id or new_session_id()
        self.name = name

    def send(self, mtype: MsgType, step: int, /, **fields) -> Message:
        msg = Message(mtype, self.session_id, step, fields)
        self.channel.send(msg)
        return msg

    def expect(self, mtype: MsgType, step: int, timeout: float | None = DEFAULT_TIMEOUT) -> Message:
        try:
            msg = self.channel.recv(timeout)
        except MalformedData as exc:
            raise OutOfOrder(f"unparseable message: {exc.detail}", step=self.name) from None
        if msg.type is MsgType.ERROR:
            err = error_for_code(msg["code"], msg["detail"])
            if isinstance(err, ProtocolAbort):
                err.step = msg["step"]
            raise err
        if msg.session_id != self.session_id:
            raise OutOfOrder("message belongs to another session", step=self.name)
        if msg.type is not mtype or msg.step != step:
            raise OutOfOrder(f"expected {mtype.name} step {step}, got {msg.type.name} "
                             f"step {msg.step}", step=self.name)
        return msg

    def report(self, exc: VaultError) -> None:
        """Tell the peer why this side is aborting (best effort)."""
        if getattr(exc, "remote", False):
            return
        step = getattr(exc, "step", "") or self.name
        try:
            self.send(MsgType.ERROR, 0, code=exc.code, detail=exc.detail or "", step=step)
        except (OSError, ConnectionError, VaultError):
            pass


def run_pair(left: Callable[[], object], right: Callable[[], object],
             timeout: float = 120.0) -> tuple[object, object]:
    """Run two protocol parties concurrently; re-raise the first failure.

    Returns ``(left_result, right_result)``.  Exceptions are re-raised with the
    left side taking precedence, since it is normally the caller's role.
    """
    out: dict = {}

    def target():
        try:
            out["right"] = right()
        except BaseException as exc:  # noqa: BLE001 - handed back to the caller
            out["right_exc"] = exc

    t = threading.Thread(target=target, daemon=True)
    t.start()
    try:
        out["left"] = left()
    except BaseException as exc:  # noqa: BLE001
        out["left_exc"] = exc
    t.join(timeout)
    if "left_exc" in out:
        raise out["left_exc"]
    if "right_exc" in out:
        raise out["right_exc"]
    return out.get("left"), out.get("right")


def run_pair_outcomes(left, right, timeout: float = 120.0) -> tuple[object, object]:
    """Like :func:`run_pair` but returns results or exception objects for both sides."""
    out: dict = {}

    def wrap(key, fn):
        try:
            out[key] = fn()
        except BaseException as exc:  # noqa: BLE001
            out[key] = exc

    t = threading.Thread(target=wrap, args=("right", right), daemon=True)
    t.start()
    wrap("left", left)
    t.join(timeout)
    return out.get("left"), out.get("right")
