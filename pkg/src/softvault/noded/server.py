"""Socket servers around a :class:`Station`.

The TCP listener serves protocol sessions to other nodes.  A Unix socket in
the state directory (mode 0600) accepts CONTROL messages from the local
operator; CONTROL frames arriving on the TCP listener are rejected like any
other type the role does not serve.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import socketserver
import threading

from ..errors import FrameError, MalformedData, ProtocolAbort, VaultError
from ..protocols.channel import Session, SocketChannel
from ..protocols.messages import Message, MsgType
from .frame import Frame, write_frame
from .node import Station

log = logging.getLogger("softvault.noded")

IDLE_TIMEOUT = 300.0
_NO_SESSION = bytes(16)


def _send_error(sock: socket.socket, exc: VaultError, session_id: bytes = _NO_SESSION) -> None:
    msg = Message(MsgType.ERROR, session_id, 0,
                  {"code": exc.code, "detail": exc.detail or "", "step": "frame"})
    try:
        write_frame(sock, Frame(msg.type, msg.session_id, msg.payload()))
    except OSError:
        pass


class _PeerHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        station: Station = self.server.station
        ch = SocketChannel(self.request)
        while True:
            try:
                first = ch.recv(timeout=IDLE_TIMEOUT)
            except (FrameError, MalformedData) as exc:
                # Oversized or garbled frame: say why, then drop the connection.
                _send_error(self.request, exc)
                return
            except (ConnectionError, OSError, VaultError):
                return
            try:
                station.dispatch(ch, first)
            except ProtocolAbort:
                # The protocol already told the peer; the session is over.
                return
            except VaultError as exc:
                if not exc.remote:
                    Session(ch, first.session_id).report(exc)
                log.info("session %s rejected: %s", first.session_id.hex(), exc.code)
            except (ConnectionError, OSError):
                return


class _ControlHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        station: Station = self.server.station
        ch = SocketChannel(self.request)
        try:
            msg = ch.recv(timeout=IDLE_TIMEOUT)
        except (FrameError, MalformedData) as exc:
            _send_error(self.request, exc)
            return
        except (ConnectionError, OSError, VaultError):
            return
        s = Session(ch, msg.session_id, name="control")
        try:
            if msg.type is not MsgType.CONTROL:
                raise MalformedData(f"control socket only takes CONTROL, got {msg.type.name}")
            result = station.control(msg["command"], json.loads(msg["args"] or "{}"))
            s.send(MsgType.CONTROL_RESULT, 1, result=json.dumps(result))
        except VaultError as exc:
            try:
                s.send(MsgType.ERROR, 0, code=exc.code, detail=exc.detail or "",
                       step=getattr(exc, "step", "") or "control")
            except (ConnectionError, OSError):
                pass
        except (ConnectionError, OSError):
            pass
        except (KeyError, ValueError, TypeError) as exc:
            s.send(MsgType.ERROR, 0, code="BadConfig", detail=f"bad control arguments: {exc}",
                   step="control")


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class _UnixServer(socketserver.ThreadingUnixStreamServer):
    daemon_threads = True


class NodeServer:
    """TCP + control listeners for one station.  ``start`` returns the bound address."""

    def __init__(self, station: Station, control: bool = True):
        self.station = station
        self.tcp = _TCPServer(station.config.listen, _PeerHandler)
        self.tcp.station = station
        self.unix = None
        if control:
            path = station.config.control_socket
            if path.exists():
                path.unlink()
            old = os.umask(0o177)
            try:
                self.unix = _UnixServer(str(path), _ControlHandler)
            finally:
                os.umask(old)
            self.unix.station = station
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> tuple[str, int]:
        host, port = self.tcp.server_address[:2]
        return host, port

    def start(self) -> tuple[str, int]:
        self.station.address = self.address
        for srv in (self.tcp, self.unix):
            if srv is None:
                continue
            t = threading.Thread(target=srv.serve_forever, daemon=True)
            t.start()
            self._threads.append(t)
        return self.address

    def shutdown(self) -> None:
        for srv in (self.tcp, self.unix):
            if srv is not None:
                srv.shutdown()
                srv.server_close()
        if self.unix is not None:
            try:
                self.station.config.control_socket.unlink()
            except FileNotFoundError:
                pass
        self.station.close()
