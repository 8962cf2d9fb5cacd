"""Protocol message types, their numeric tags and field schemas.

A message payload is ``step u8 | field count u16 | fields`` where each field
is ``name (text) | kind u8 | value``.  Fields are written in sorted order and
must match the type's schema exactly.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field

from ..encoding import Reader, Writer
from ..errors import MalformedData


class MsgType(enum.IntEnum):
    ERROR = 0x0001
    CERT_FETCH = 0x0101
    CERT_RESPONSE = 0x0102
    ISSUE_REQUEST = 0x0103
    ISSUE_RESPONSE = 0x0104
    IAS_VERIFY = 0x0201
    IAS_REPORT = 0x0202
    PCK_FETCH = 0x0301
    PCK_ENTRY = 0x0302
    TRANSFER_HELLO = 0x0401
    TRANSFER_REPLY = 0x0402
    TRANSFER_KEY = 0x0403
    TRANSFER_DONE = 0x0404
    PROVISION_HELLO = 0x0501
    PROVISION_HELLO_ACK = 0x0502
    PROVISION_QUOTE = 0x0503
    PROVISION_KEYS = 0x0504
    PROVISION_DONE = 0x0505
    CONTROL = 0x0601
    CONTROL_RESULT = 0x0602


B, S, I = bytes, str, int

SCHEMAS: dict[MsgType, dict[str, type]] = {
    MsgType.ERROR: {"code": S, "detail": S, "step": S},
    MsgType.CERT_FETCH: {},
    MsgType.CERT_RESPONSE: {"cert": B},
    MsgType.ISSUE_REQUEST: {"csr": B, "quote": B},
    MsgType.ISSUE_RESPONSE: {"cert": B},
    MsgType.IAS_VERIFY: {"quote": B},
    MsgType.IAS_REPORT: {"avr": B},
    MsgType.PCK_FETCH: {"platform_id": B},
    MsgType.PCK_ENTRY: {"entry": B},
    MsgType.TRANSFER_HELLO: {"cert": B, "eph_pk": B, "sig": B},
    MsgType.TRANSFER_REPLY: {"cert": B, "eph_pk": B, "sig": B},
    MsgType.TRANSFER_KEY: {"wrapped": B},
    MsgType.TRANSFER_DONE: {"confirm": B},
    MsgType.PROVISION_HELLO: {"node_type": S, "platform_id": B},
    MsgType.PROVISION_HELLO_ACK: {"platform_id": B},
    MsgType.PROVISION_QUOTE: {"eph_pk": B, "quote": B},
    MsgType.PROVISION_KEYS: {"wrapped": B},
    MsgType.PROVISION_DONE: {"count": I, "confirm": B},
    MsgType.CONTROL: {"command": S, "args": S},
    MsgType.CONTROL_RESULT: {"result": S},
}

_KIND = {bytes: 0, str: 1, int: 2}


@dataclass(frozen=True)
class Message:
    type: MsgType
    session_id: bytes
    step: int
    fields: dict = field(default_factory=dict)

    def __getitem__(self, name: str):
        return self.fields[name]

    def payload(self) -> bytes:
        validate(self.type, self.fields)
        w = Writer().u8(self.step).u16(len(self.fields))
        for name in sorted(self.fields):
            value = self.fields[name]
            kind = type(value)
            w.text(name).u8(_KIND[kind])
            if kind is bytes:
                w.blob(value)
            elif kind is str:
                w.text(value)
            else:
                w.u64(value)
        return w.getvalue()

    @classmethod
    def from_payload(cls, mtype: int, session_id: bytes, payload: bytes) -> "Message":
        try:
            mtype = MsgType(mtype)
        except ValueError:
            raise MalformedData(f"unknown message type 0x{mtype:04x}") from None
        r = Reader(payload)
        step = r.u8()
        fields: dict = {}
        prev = None
        for _ in range(r.u16()):
            name, kind = r.text(), r.u8()
            if prev is not None and name <= prev:
                raise MalformedData("message fields out of canonical order")
            prev = name
            if kind == 0:
                fields[name] = r.blob()
            elif kind == 1:
                fields[name] = r.text()
            elif kind == 2:
                fields[name] = r.u64()
            else:
                raise MalformedData(f"unknown field kind {kind}")
        r.end()
        validate(mtype, fields)
        return cls(mtype, session_id, step, fields)


def validate(mtype: MsgType, fields: dict) -> None:
    schema = SCHEMAS[mtype]
    if set(fields) != set(schema):
        raise MalformedData(f"{mtype.name} expects fields {sorted(schema)}, got {sorted(fields)}")
    for name, kind in schema.items():
        if type(fields[name]) is not kind:
            raise MalformedData(f"{mtype.name}.{name} must be {kind.__name__}")


def new_session_id() -> bytes:
    return os.urandom(16)
