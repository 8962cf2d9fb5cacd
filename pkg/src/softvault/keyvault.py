"""PKCS#11-style token that lives inside the enclave boundary.

Files kept for a token at ``<path>``:

``<path>``          sealed key state (PIN hash, key objects), rewritten only
                    when persistent objects change.
``<path>.journal``  the audit log, one AES-GCM record per entry under an
                    enclave-derived key, appended per operation.
``<path>.counter``  8-byte big-endian operation counter + 32-byte log head,
                    written with write/fsync/rename before any result is
                    returned.  It models a hardware monotonic counter.
``<path>.pending``  the next sealed state, written before the counter so an
                    interrupted commit can be rolled forward.
``<path>.lock``     advisory lock: one process per vault.

Every public operation that passes PIN authentication appends exactly one
audit-log entry, success or failure.  Private key material never leaves this
module except AES-GCM wrapped under a channel key (``wrap_keys``).
"""

from __future__ import annotations

import enum
import fcntl
import hashlib
import hmac
import json
import os
import threading
import time
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Iterable

from . import crypto
from .crypto import KeyAlgorithm
from .encoding import Reader, Writer, encode_params, sha256
from .errors import (
    AlreadyInitialized,
    AuthFailure,
    ChainCorrupted,
    CounterWriteFailure,
    DecryptFailure,
    IncompleteOperation,
    MalformedData,
    NonExtractable,
    ReservedMessage,
    RollbackDetected,
    UnknownHandle,
    UnsupportedAlgorithm,
    VaultError,
    VaultLocked,
    WrongKeyType,
)

TOKEN_MAGIC = b"BFTOKEN1"
WRAP_MAGIC = b"BFWRAP01"
JOURNAL_MAGIC = b"BFJRNL01"
GENESIS_HASH = b"\x00" * 32
COUNTER_SIZE = 8 + 32

# Messages with this prefix are signed only through sign_ephemeral_binding.
RESERVED_PREFIX = b"BF-SIGMA/"

SIGNING_ALGORITHMS = {KeyAlgorithm.RSA2048, KeyAlgorithm.ECDSA_P256}
ASYMMETRIC_ALGORITHMS = SIGNING_ALGORITHMS | {KeyAlgorithm.ECDH_P256}

_SCRYPT = dict(n=2 ** 14, r=8, p=1, dklen=32)
_FAILURES_BEFORE_DELAY = 3


class LogStatus(str, enum.Enum):
    OK = "OK"
    ROLLBACK_DETECTED = "RollbackDetected"
    CHAIN_CORRUPTED = "ChainCorrupted"
    INCOMPLETE_OPERATION = "IncompleteOperation"


_STATUS_ERRORS = {
    LogStatus.ROLLBACK_DETECTED: RollbackDetected,
    LogStatus.CHAIN_CORRUPTED: ChainCorrupted,
    LogStatus.INCOMPLETE_OPERATION: IncompleteOperation,
}


@dataclass(frozen=True)
class LogReport:
    status: LogStatus
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status is LogStatus.OK

    def __bool__(self) -> bool:
        return self.ok

    def raise_for_status(self) -> None:
        if not self.ok:
            raise _STATUS_ERRORS[self.status](self.detail)


@dataclass(frozen=True)
class LogEntry:
    seq: int
    timestamp_us: int
    api_name: str
    params_hash: bytes
    prev_hash: bytes

    def encode(self) -> bytes:
        return (Writer().u64(self.seq).u64(self.timestamp_us).text(self.api_name)
                .fixed(self.params_hash, 32).fixed(self.prev_hash, 32).getvalue())

    @cached_property
    def entry_hash(self) -> bytes:
        return sha256(self.encode())

    @classmethod
    def read(cls, r: Reader) -> "LogEntry":
        return cls(r.u64(), r.u64(), r.text(), r.fixed(32), r.fixed(32))

    def to_record(self) -> dict:
        return {
            "seq": self.seq,
            "timestamp_us": self.timestamp_us,
            "api_name": self.api_name,
            "params_hash": self.params_hash.hex(),
            "prev_hash": self.prev_hash.hex(),
            "entry_hash": self.entry_hash.hex(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LogEntry":
        return cls(int(rec["seq"]), int(rec["timestamp_us"]), str(rec["api_name"]),
                   bytes.fromhex(rec["params_hash"]), bytes.fromhex(rec["prev_hash"]))


def params_hash(params: dict) -> bytes:
    return sha256(encode_params(params))


class AuditLog:
    """Hash-chained operation log; ``head_hash`` is the hash of the last entry."""

    def __init__(self, entries: Iterable[LogEntry] = ()):
        self.entries: list[LogEntry] = []
        self._encoded = bytearray()
        for e in entries:
            self.entries.append(e)
            self._encoded += e.encode()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def head_hash(self) -> bytes:
        return self.entries[-1].entry_hash if self.entries else GENESIS_HASH

    def append(self, api_name: str, params: dict) -> LogEntry:
        entry = LogEntry(len(self.entries) + 1, time.time_ns() // 1000, api_name,
                         params_hash(params), self.head_hash)
        self.entries.append(entry)
        self._encoded += entry.encode()
        return entry

    def truncate(self, n: int) -> None:
        del self.entries[n:]
        self._encoded = bytearray(b"".join(e.encode() for e in self.entries))

    def encoded(self) -> bytes:
        return bytes(self._encoded)

    def chain_break(self) -> int | None:
        """Index of the first entry whose link or sequence number is wrong."""
        prev = GENESIS_HASH
        for i, e in enumerate(self.entries):
            if e.seq != i + 1 or e.prev_hash != prev:
                return i
            prev = e.entry_hash
        return None

    def records(self) -> list[dict]:
        return [e.to_record() for e in self.entries]


def check_log(entries: list[LogEntry], counter: int, head: bytes) -> LogReport:
    """Compare a log against the committed (counter, head) pair."""
    log = AuditLog(entries)
    broken = log.chain_break()
    if broken is not None:
        return LogReport(LogStatus.CHAIN_CORRUPTED, f"hash chain broken at entry {broken + 1}")
    n = len(log)
    if counter > n:
        return LogReport(LogStatus.ROLLBACK_DETECTED,
                         f"counter is {counter} but state holds {n} entries")
    if counter < n:
        return LogReport(LogStatus.CHAIN_CORRUPTED,
                         f"state holds {n} entries but only {counter} were committed")
    if log.head_hash != head:
        return LogReport(LogStatus.CHAIN_CORRUPTED, "log head does not match committed head")
    return LogReport(LogStatus.OK)


def read_counter(path: str | os.PathLike) -> tuple[int, bytes]:
    data = Path(path).read_bytes()
    if len(data) != COUNTER_SIZE:
        raise MalformedData("counter file has wrong size")
    return int.from_bytes(data[:8], "big"), data[8:]


def write_counter(path: str | os.PathLike, counter: int, head: bytes) -> None:
    _atomic_write(Path(path), counter.to_bytes(8, "big") + head, fsync=True)


def _atomic_write(path: Path, data: bytes, fsync: bool) -> None:
    tmp = path.with_name(path.name + ".tmp")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    try:
        os.write(fd, data)
        if fsync:
            os.fsync(fd)
    finally:
        os.close(fd)
    os.replace(tmp, path)


@dataclass(frozen=True)
class KeyObject:
    handle: int
    algorithm: KeyAlgorithm
    public_part: bytes
    private_part: bytes
    label: str
    extractable: bool = False
    cert: bytes = b""
    volatile: bool = False

    def __repr__(self) -> str:
        return (f"KeyObject(handle={self.handle}, algorithm={self.algorithm.name}, "
                f"label={self.label!r}, volatile={self.volatile})")

    def encode(self) -> bytes:
        return (Writer().u64(self.handle).u8(self.algorithm).text(self.label)
                .blob(self.public_part).blob(self.private_part).blob(self.cert)
                .u8(int(self.extractable)).getvalue())

    @classmethod
    def read(cls, r: Reader) -> "KeyObject":
        handle, alg, label = r.u64(), KeyAlgorithm(r.u8()), r.text()
        pub, priv, cert = r.blob(), r.blob(), r.blob()
        return cls(handle, alg, pub, priv, label, bool(r.u8()), cert)


@dataclass(frozen=True)
class ObjectInfo:
    """Public view of a key object."""

    handle: int
    algorithm: KeyAlgorithm
    label: str
    public_part: bytes
    cert: bytes
    volatile: bool


class _Crash(BaseException):
    """Raised by fault-injection hooks to abandon a commit midway."""


@dataclass
class _DiskCheck:
    report: LogReport
    entries: list[LogEntry]
    committed_size: int
    pending_state: bytes | None = None


def _journal_aad(seq: int) -> bytes:
    return JOURNAL_MAGIC + seq.to_bytes(8, "big")


def _write_file(path: str, data: bytes) -> None:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    try:
        os.write(fd, data)
        os.fsync(fd)
    finally:
        os.close(fd)


class Token:
    """A single vault token.  Obtain one with :meth:`init`, :meth:`open` or :meth:`ephemeral`."""

    def __init__(self, enclave, path: str | os.PathLike | None, *, quoter=None,
                 boundary: bool = True, pin_delay: float = 1.0):
        self.enclave = enclave
        self.path = Path(path) if path is not None else None
        self.quoter = quoter
        self.boundary = boundary
        self.pin_delay = pin_delay
        self.slot_id = 0
        self._salt = b""
        self._pin_hash = b""
        self._pin_fast: bytes | None = None
        self._failures = 0
        self._next_handle = 1
        self._objects: dict[int, KeyObject] = {}
        self._volatile: dict[int, KeyObject] = {}
        self._encoded_objects: dict[int, bytes] = {}
        self._keys: dict[int, Any] = {}
        self._dirty = False
        self._state_seq = 0
        self.log = AuditLog()
        self._lock = threading.RLock()
        self._lock_fd: int | None = None
        self._journal_fd: int | None = None
        self._journal_size = 0
        self._journal_key: bytes | None = None
        self.fault: Callable[[str], None] | None = None
        if self.path is not None:
            base = str(self.path)
            self._paths = {s: base + s for s in ("", ".counter", ".journal", ".pending", ".lock")}

    # --- paths -------------------------------------------------------------

    @property
    def counter_path(self) -> Path:
        return Path(self._paths[".counter"])

    @property
    def journal_path(self) -> Path:
        return Path(self._paths[".journal"])

    @property
    def pending_path(self) -> Path:
        return Path(self._paths[".pending"])

    @property
    def lock_path(self) -> Path:
        return Path(self._paths[".lock"])

    def files(self) -> list[Path]:
        """Every file this token keeps on disk."""
        return [Path(p) for p in self._paths.values() if os.path.exists(p)]

    # --- lifecycle -----------------------------------------------------------

    @classmethod
    def init(cls, path, pin: str, enclave, *, quoter=None, slot_id: int = 0,
             overwrite: bool = False, pin_delay: float = 1.0) -> "Token":
        tok = cls(enclave, path, quoter=quoter, pin_delay=pin_delay)
        tok.path.parent.mkdir(parents=True, exist_ok=True)
        tok._acquire_lock()
        try:
            if tok.path.exists() and not overwrite:
                raise AlreadyInitialized(f"token already exists at {tok.path}")
            tok.slot_id = slot_id
            tok._set_pin(pin)
            tok.pending_path.unlink(missing_ok=True)
            _write_file(tok._paths[".pending"], tok._sealed_state())
            os.replace(tok._paths[".pending"], tok._paths[""])
            _write_file(tok._paths[".journal"], JOURNAL_MAGIC)
            write_counter(tok.counter_path, 0, GENESIS_HASH)
            tok._open_journal(len(JOURNAL_MAGIC))
        except BaseException:
            tok.close()
            raise
        return tok

    @classmethod
    def ephemeral(cls, pin: str, enclave=None, *, quoter=None, boundary: bool = False,
                  pin_delay: float = 0.0) -> "Token":
        """In-memory token; with ``boundary=False`` it skips sealing, logging and quoting."""
        tok = cls(enclave, None, quoter=quoter, boundary=boundary, pin_delay=pin_delay)
        tok._set_pin(pin)
        return tok

    @classmethod
    def open(cls, path, pin: str, enclave, *, quoter=None, recover: bool = False,
             pin_delay: float = 1.0) -> "Token":
        tok = cls(enclave, path, quoter=quoter, pin_delay=pin_delay)
        tok._acquire_lock()
        try:
            tok._load(recover)
            tok._authenticate(pin)
        except BaseException:
            tok.close()
            raise
        return tok

    @classmethod
    def inspect(cls, path, enclave) -> tuple[LogReport, AuditLog]:
        """Read-only integrity check of a vault at rest; needs no PIN and takes no lock."""
        tok = cls(enclave, path)
        tok._restore(tok._unseal_file(tok._paths[""]))
        check = tok._examine()
        return check.report, AuditLog(check.entries)

    def close(self) -> None:
        with self._lock:
            self._volatile.clear()
            for h in [h for h in self._keys if h not in self._objects]:
                del self._keys[h]
            if self._journal_fd is not None:
                os.close(self._journal_fd)
                self._journal_fd = None
            if self._lock_fd is not None:
                fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
                os.close(self._lock_fd)
                self._lock_fd = None

    def __enter__(self) -> "Token":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _acquire_lock(self) -> None:
        self.lock_path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.lock_path, os.O_RDWR | os.O_CREAT, 0o600)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(fd)
            raise VaultLocked(f"vault {self.path} is in use by another process") from None
        self._lock_fd = fd

    # --- PIN -----------------------------------------------------------------

    def _set_pin(self, pin: str) -> None:
        self._salt = os.urandom(16)
        self._pin_hash = hashlib.scrypt(pin.encode(), salt=self._salt, **_SCRYPT)
        self._pin_fast = self._fast_digest(pin)

    def _fast_digest(self, pin: str) -> bytes:
        return hmac.new(self._salt, str(pin).encode(), "sha256").digest()

    def _authenticate(self, pin: str) -> None:
        if self._pin_fast is not None and hmac.compare_digest(self._fast_digest(pin), self._pin_fast):
            self._failures = 0
            return
        candidate = hashlib.scrypt(str(pin).encode(), salt=self._salt, **_SCRYPT)
        if hmac.compare_digest(candidate, self._pin_hash):
            self._pin_fast = self._fast_digest(pin)
            self._failures = 0
            return
        self._failures += 1
        if self._failures >= _FAILURES_BEFORE_DELAY and self.pin_delay:
            time.sleep(self.pin_delay)
        raise AuthFailure("incorrect PIN")

    # --- persistence ---------------------------------------------------------
    #
    # Commit order for one operation (entry n):
    #   1. if persistent objects changed: seal state (state_seq = n) to .pending
    #   2. append the sealed log record to .journal
    #   3. write the counter (n, head)           <- the commit point
    #   4. if step 1 ran: rename .pending over the state file
    # A crash before 3 leaves an uncommitted journal tail that open() discards.
    # A crash between 3 and 4 leaves the state file behind the log; open()
    # reports IncompleteOperation and ``recover=True`` rolls the pending state
    # forward.

    def _serialize(self) -> bytes:
        w = (Writer().raw(TOKEN_MAGIC).u32(self.slot_id).fixed(self._salt, 16)
             .fixed(self._pin_hash, 32).u64(self._next_handle).u64(self._state_seq)
             .u32(len(self._objects)))
        for h in sorted(self._objects):
            enc = self._encoded_objects.get(h)
            if enc is None:
                enc = self._encoded_objects[h] = self._objects[h].encode()
            w.raw(enc)
        return w.getvalue()

    def _sealed_state(self) -> bytes:
        return self.enclave.seal(self._serialize()).to_bytes()

    def _restore(self, data: bytes) -> None:
        r = Reader(data)
        if r.fixed(8) != TOKEN_MAGIC:
            raise MalformedData("sealed state is not a token")
        self.slot_id = r.u32()
        self._salt, self._pin_hash = r.fixed(16), r.fixed(32)
        self._next_handle = r.u64()
        self._state_seq = r.u64()
        self._objects = {}
        for _ in range(r.u32()):
            obj = KeyObject.read(r)
            self._objects[obj.handle] = obj
        r.end()
        self._encoded_objects.clear()
        self._keys.clear()

    def _unseal_file(self, path: str) -> bytes:
        from .soft_tee import SealedBlob
        return self.enclave.unseal(SealedBlob.from_bytes(Path(path).read_bytes()))

    def _key_for_journal(self) -> bytes:
        if self._journal_key is None:
            self._journal_key = self.enclave.derive_key("audit-journal")
        return self._journal_key

    def _read_journal(self):
        """Decrypt journal records in order; stops at a torn or unauthentic record.

        Returns (entries, state-change flags, end offset of each record, seq of
        the first bad record or None).
        """
        data = self.journal_path.read_bytes()
        if data[:len(JOURNAL_MAGIC)] != JOURNAL_MAGIC:
            raise ChainCorrupted("journal header is damaged")
        key = self._key_for_journal()
        entries, flags, ends = [], [], []
        pos = len(JOURNAL_MAGIC)
        while pos < len(data):
            seq = len(entries) + 1
            size = int.from_bytes(data[pos:pos + 4], "big")
            end = pos + 4 + size
            if pos + 4 > len(data) or end > len(data):
                return entries, flags, ends, seq
            try:
                r = Reader(crypto.aead_decrypt(key, data[pos + 4:end], _journal_aad(seq)))
                flag = bool(r.u8())
                entry = LogEntry.read(r)
                r.end()
            except (crypto.InvalidTag, MalformedData):
                return entries, flags, ends, seq
            entries.append(entry)
            flags.append(flag)
            ends.append(end)
            pos = end
        return entries, flags, ends, None

    def _examine(self) -> _DiskCheck:
        """Cross-check state file, journal and counter.  ``self`` holds the state file."""
        if not self.counter_path.exists():
            return _DiskCheck(LogReport(LogStatus.ROLLBACK_DETECTED,
                                        "monotonic counter file is missing"), [], 0)
        counter, head = read_counter(self.counter_path)
        entries, flags, ends, bad_at = self._read_journal()
        if bad_at is not None and bad_at <= counter:
            return _DiskCheck(LogReport(LogStatus.CHAIN_CORRUPTED,
                                        f"journal record {bad_at} is damaged"), entries, 0)
        if len(entries) > counter + 1:
            return _DiskCheck(LogReport(LogStatus.CHAIN_CORRUPTED,
                                        f"journal holds {len(entries)} entries but only "
                                        f"{counter} were committed"), entries, 0)
        committed = entries[:counter]
        size = ends[counter - 1] if 0 < counter <= len(ends) else len(JOURNAL_MAGIC)
        report = check_log(committed, counter, head)
        if not report.ok:
            return _DiskCheck(report, committed, size)
        last_change = max((i + 1 for i, f in enumerate(flags[:counter]) if f), default=0)
        if self._state_seq == last_change:
            return _DiskCheck(report, committed, size)
        pending = self._pending_state(last_change)
        if pending is not None:
            return _DiskCheck(LogReport(LogStatus.INCOMPLETE_OPERATION,
                                        f"operation {last_change} committed but its key state "
                                        "was not installed"), committed, size, pending)
        if self._state_seq < last_change:
            return _DiskCheck(LogReport(LogStatus.ROLLBACK_DETECTED,
                                        f"key state is from operation {self._state_seq}, log "
                                        f"expects operation {last_change}"), committed, size)
        return _DiskCheck(LogReport(LogStatus.CHAIN_CORRUPTED,
                                    "key state is ahead of the committed log"), committed, size)

    def _pending_state(self, state_seq: int) -> bytes | None:
        if not self.pending_path.exists():
            return None
        probe = Token(self.enclave, self.path)
        try:
            data = self._unseal_file(self._paths[".pending"])
            probe._restore(data)
        except (VaultError, ValueError):
            return None
        return data if probe._state_seq == state_seq else None

    def _load(self, recover: bool) -> None:
        if not self.path.exists():
            raise VaultError(f"no token at {self.path}")
        self._restore(self._unseal_file(self._paths[""]))
        check = self._examine()
        if check.report.status is LogStatus.INCOMPLETE_OPERATION and recover:
            os.replace(self._paths[".pending"], self._paths[""])
            self._restore(check.pending_state)
            check = self._examine()
        check.report.raise_for_status()
        self.pending_path.unlink(missing_ok=True)
        self.log = AuditLog(check.entries)
        self._open_journal(check.committed_size)

    def _open_journal(self, size: int) -> None:
        fd = os.open(self._paths[".journal"], os.O_RDWR)
        if os.fstat(fd).st_size != size:
            os.ftruncate(fd, size)
            os.fsync(fd)
        os.lseek(fd, size, os.SEEK_SET)
        self._journal_fd = fd
        self._journal_size = size

    def _commit(self) -> None:
        n = len(self.log)
        entry = self.log.entries[-1]
        changed = self._dirty
        prev_seq = self._state_seq
        if changed:
            self._state_seq = n
            _write_file(self._paths[".pending"], self._sealed_state())
        if self.fault:
            self.fault("before_journal")
        body = bytes([changed]) + entry.encode()
        record = crypto.aead_encrypt(self._key_for_journal(), body, _journal_aad(n))
        fd = self._journal_fd
        os.write(fd, len(record).to_bytes(4, "big") + record)
        os.fsync(fd)
        if self.fault:
            self.fault("before_counter")
        try:
            write_counter(self._paths[".counter"], n, entry.entry_hash)
        except OSError as exc:
            os.ftruncate(fd, self._journal_size)
            os.lseek(fd, self._journal_size, os.SEEK_SET)
            self._state_seq = prev_seq
            if changed:
                Path(self._paths[".pending"]).unlink(missing_ok=True)
            raise CounterWriteFailure(str(exc)) from exc
        self._journal_size += 4 + len(record)
        self._dirty = False
        if self.fault:
            self.fault("after_counter")
        if changed:
            os.replace(self._paths[".pending"], self._paths[""])

    # --- logging -------------------------------------------------------------

    def append_log(self, api_name: str, params: dict) -> bytes:
        """Chain one entry onto the log and commit it; returns the new head hash."""
        with self._lock:
            if not self.boundary:
                return self.log.head_hash
            self.log.append(api_name, params)
            if self.path is not None:
                self._commit()
            return self.log.head_hash

    def _run(self, api_name: str, pin: str, params: dict, fn: Callable[[], Any]):
        """Authenticate, run ``fn``, and log exactly one entry whatever the outcome."""
        with self._lock:
            self._authenticate(pin)
            saved = (dict(self._objects), dict(self._volatile), self._next_handle, len(self.log))
            error: VaultError | None = None
            result = None
            try:
                result = fn()
            except VaultError as exc:
                error = exc
            params = dict(params, result=error.code if error else "ok")
            try:
                self.append_log(api_name, params)
            except CounterWriteFailure:
                self._objects, self._volatile, self._next_handle = saved[0], saved[1], saved[2]
                self._encoded_objects.clear()
                self._dirty = False
                self.log.truncate(saved[3])
                raise
            if error is not None:
                raise error
            return result

    def record_event(self, api_name: str, params: dict, pin: str) -> bytes:
        """Log a protocol-level event (e.g. a completed issuance)."""
        self._run(api_name, pin, params, lambda: None)
        return self.log.head_hash

    def verify_log(self) -> LogReport:
        """Check the in-memory log against the committed counter and head."""
        with self._lock:
            if not self.boundary or self.path is None:
                counter, head = len(self.log), self.log.head_hash
            else:
                counter, head = read_counter(self.counter_path)
            return check_log(self.log.entries, counter, head)

    def export_log(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            for rec in self.log.records():
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    # --- objects -------------------------------------------------------------

    def _new_handle(self) -> int:
        h = self._next_handle
        self._next_handle += 1
        return h

    def _get(self, handle: int) -> KeyObject:
        obj = self._objects.get(handle) or self._volatile.get(handle)
        if obj is None:
            raise UnknownHandle(f"no object with handle {handle}")
        return obj

    def _private_key(self, obj: KeyObject):
        key = self._keys.get(obj.handle)
        if key is None:
            key = self._keys[obj.handle] = crypto.private_from_der(obj.private_part)
        return key

    def _store(self, obj: KeyObject) -> None:
        if obj.volatile:
            self._volatile[obj.handle] = obj
        else:
            self._objects[obj.handle] = obj
            self._encoded_objects.pop(obj.handle, None)
            self._dirty = True

    def _drop(self, handle: int) -> None:
        if handle in self._objects:
            self._dirty = True
        self._objects.pop(handle, None)
        self._volatile.pop(handle, None)
        self._encoded_objects.pop(handle, None)
        self._keys.pop(handle, None)

    def objects(self) -> list[ObjectInfo]:
        with self._lock:
            objs = list(self._objects.values()) + list(self._volatile.values())
            return [ObjectInfo(o.handle, o.algorithm, o.label, o.public_part, o.cert, o.volatile)
                    for o in sorted(objs, key=lambda o: o.handle)]

    def find_handle(self, public_part: bytes) -> int | None:
        with self._lock:
            for obj in self._objects.values():
                if obj.public_part == public_part:
                    return obj.handle
            return None

    def public_key(self, handle: int) -> bytes:
        with self._lock:
            return self._get(handle).public_part

    def certificate(self, handle: int) -> bytes:
        with self._lock:
            return self._get(handle).cert

    # --- operations ----------------------------------------------------------

    def _quote(self, data: bytes, quote_type):
        if self.quoter is None or not self.boundary:
            return None
        return self.quoter(data, quote_type)

    def generate_keypair(self, algorithm: KeyAlgorithm | str, label: str, pin: str, *,
                         quote_type=None, attest: bool = True, ephemeral: bool = False):
        """Create a non-extractable key pair; returns ``(handle, public_part, quote)``.

        The quote (None when the token has no quoter or ``attest`` is False)
        binds ``public_part`` so a relying party can check the key was born in
        this enclave.
        """
        def op():
            try:
                alg = algorithm if isinstance(algorithm, KeyAlgorithm) else KeyAlgorithm.parse(algorithm)
            except ValueError as exc:
                raise UnsupportedAlgorithm(str(exc)) from None
            if alg not in ASYMMETRIC_ALGORITHMS:
                raise UnsupportedAlgorithm(f"cannot generate {alg.name} key pairs")
            key = crypto.generate_private(alg)
            handle = self._new_handle()
            obj = KeyObject(handle, alg, crypto.public_bytes(key), crypto.private_to_der(key),
                            label, volatile=ephemeral)
            self._store(obj)
            self._keys[handle] = key
            quote = self._quote(obj.public_part, quote_type) if attest else None
            return handle, obj.public_part, quote

        return self._run("generate_keypair", pin,
                         {"algorithm": str(algorithm), "label": label, "ephemeral": ephemeral}, op)

    def sign(self, handle: int, message: bytes, pin: str) -> bytes:
        def op():
            if bytes(message[:len(RESERVED_PREFIX)]) == RESERVED_PREFIX:
                raise ReservedMessage("message uses a prefix reserved for channel bindings")
            return self._sign(handle, message)

        return self._run("sign", pin, {"handle": handle, "message_hash": sha256(message)}, op)

    def _sign(self, handle: int, message: bytes) -> bytes:
        obj = self._get(handle)
        if obj.algorithm not in SIGNING_ALGORITHMS:
            raise WrongKeyType(f"{obj.algorithm.name} keys cannot sign")
        return crypto.sign_with(self._private_key(obj), message)

    def sign_ephemeral_binding(self, handle: int, eph_handle: int, context: bytes, pin: str) -> bytes:
        """Sign a vault-resident ephemeral ECDH public key with a long-term key.

        This is the only path that produces signatures over ``RESERVED_PREFIX``
        messages, so a signature of this shape always vouches for a key the
        vault itself generated.
        """
        def op():
            eph = self._get(eph_handle)
            if eph.algorithm is not KeyAlgorithm.ECDH_P256 or not eph.volatile:
                raise WrongKeyType("binding target must be an ephemeral ECDH key")
            return self._sign(handle, ephemeral_binding_message(context, eph.public_part))

        return self._run("sign_ephemeral_binding", pin,
                         {"handle": handle, "eph_handle": eph_handle, "context": sha256(context)}, op)

    def export_private(self, handle: int, pin: str):
        def op():
            self._get(handle)
            raise NonExtractable("private keys never leave the vault")

        return self._run("export_private", pin, {"handle": handle}, op)

    def destroy_object(self, handle: int, pin: str) -> None:
        def op():
            self._get(handle)
            self._drop(handle)

        self._run("destroy_object", pin, {"handle": handle}, op)

    def attach_cert(self, handle: int, cert: bytes, pin: str) -> None:
        def op():
            obj = self._get(handle)
            self._store(replace(obj, cert=bytes(cert)))

        self._run("attach_cert", pin, {"handle": handle, "cert_hash": sha256(cert)}, op)

    def quote_public(self, handle: int, pin: str, quote_type=None):
        """Fresh quote binding the public part of a resident key."""
        def op():
            obj = self._get(handle)
            if self.quoter is None:
                raise VaultError("token has no quoting enclave")
            return self.quoter(obj.public_part, quote_type)

        return self._run("quote_public", pin, {"handle": handle}, op)

    def derive_shared_key(self, eph_handle: int, peer_public: bytes, transcript: bytes,
                          pin: str, purpose: str = "channel") -> int:
        """ECDH + HKDF bound to ``transcript``; the ephemeral private key is destroyed.

        Returns the handle of a volatile symmetric key.
        """
        def op():
            eph = self._get(eph_handle)
            if eph.algorithm is not KeyAlgorithm.ECDH_P256:
                raise WrongKeyType("shared keys are derived from ECDH_P256 keys only")
            peer = crypto.load_ec_point(peer_public)
            from cryptography.hazmat.primitives.asymmetric import ec
            shared = self._private_key(eph).exchange(ec.ECDH(), peer)
            secret = crypto.hkdf(shared, b"softvault/channel-key/" + purpose.encode(), salt=transcript)
            self._drop(eph_handle)
            handle = self._new_handle()
            self._store(KeyObject(handle, KeyAlgorithm.SECRET, b"", secret, f"session:{purpose}",
                                  volatile=True))
            return handle

        return self._run("derive_shared_key", pin,
                         {"eph_handle": eph_handle, "peer_public": sha256(peer_public),
                          "transcript": transcript, "purpose": purpose}, op)

    def _secret(self, handle: int) -> bytes:
        obj = self._get(handle)
        if obj.algorithm is not KeyAlgorithm.SECRET:
            raise WrongKeyType("not a symmetric session key")
        return obj.private_part

    def encrypt(self, handle: int, plaintext: bytes, aad: bytes, pin: str) -> bytes:
        return self._run("encrypt", pin, {"handle": handle, "aad": sha256(aad)},
                         lambda: crypto.aead_encrypt(self._secret(handle), plaintext, aad))

    def decrypt(self, handle: int, ciphertext: bytes, aad: bytes, pin: str) -> bytes:
        def op():
            try:
                return crypto.aead_decrypt(self._secret(handle), ciphertext, aad)
            except crypto.InvalidTag:
                raise DecryptFailure("ciphertext failed authentication") from None

        return self._run("decrypt", pin, {"handle": handle, "aad": sha256(aad)}, op)

    def wrap_keys(self, channel_handle: int, handles: Iterable[int], aad: bytes, pin: str) -> bytes:
        """Encrypt resident key pairs (with their certificates) under a session key.

        This is the only egress path for private keys.
        """
        handles = list(handles)

        def op():
            w = Writer().raw(WRAP_MAGIC).u32(len(handles))
            for h in handles:
                obj = self._get(h)
                if obj.volatile or obj.algorithm not in ASYMMETRIC_ALGORITHMS:
                    raise WrongKeyType(f"handle {h} is not a transferable key pair")
                w.u8(obj.algorithm).text(obj.label).blob(obj.public_part).blob(obj.private_part)
                w.blob(obj.cert)
            return crypto.aead_encrypt(self._secret(channel_handle), w.getvalue(), aad)

        return self._run("wrap_keys", pin,
                         {"channel": channel_handle, "handles": ",".join(map(str, handles)),
                          "aad": sha256(aad)}, op)

    def unwrap_keys(self, channel_handle: int, ciphertext: bytes, aad: bytes, pin: str,
                    provenance: dict | None = None) -> list[int]:
        """Decrypt a :meth:`wrap_keys` payload and store each key as non-extractable."""
        def op():
            try:
                payload = crypto.aead_decrypt(self._secret(channel_handle), ciphertext, aad)
            except crypto.InvalidTag:
                raise DecryptFailure("wrapped keys failed authentication") from None
            r = Reader(payload)
            if r.fixed(8) != WRAP_MAGIC:
                raise DecryptFailure("not a key-wrap payload")
            stored = []
            for _ in range(r.u32()):
                alg, label, pub, priv, cert = KeyAlgorithm(r.u8()), r.text(), r.blob(), r.blob(), r.blob()
                if crypto.public_bytes(crypto.private_from_der(priv)) != pub:
                    raise DecryptFailure("wrapped key pair is inconsistent")
                existing = self.find_handle(pub)
                if existing is not None:
                    stored.append(existing)
                    continue
                handle = self._new_handle()
                self._store(KeyObject(handle, alg, pub, priv, label, cert=cert))
                stored.append(handle)
            r.end()
            return stored

        params = {"channel": channel_handle, "ciphertext": sha256(ciphertext), "aad": sha256(aad)}
        for k, v in (provenance or {}).items():
            params[f"provenance.{k}"] = v
        return self._run("unwrap_keys", pin, params, op)


def ephemeral_binding_message(context: bytes, eph_public: bytes) -> bytes:
    return Writer().raw(RESERVED_PREFIX).blob(context).blob(eph_public).getvalue()


# Functional aliases mirroring the operation names used in the docs.

def init_token(path, pin: str, enclave, **kw) -> Token:
    return Token.init(path, pin, enclave, **kw)


def open_token(path, pin: str, enclave, **kw) -> Token:
    return Token.open(path, pin, enclave, **kw)


def generate_keypair(token: Token, algorithm, label: str, pin: str, **kw):
    return token.generate_keypair(algorithm, label, pin, **kw)


def sign(token: Token, handle: int, message: bytes, pin: str) -> bytes:
    return token.sign(handle, message, pin)


def export_private(token: Token, handle: int, pin: str):
    return token.export_private(handle, pin)


def append_log(token: Token, api_name: str, params: dict) -> bytes:
    return token.append_log(api_name, params)


def verify_log(token: Token) -> LogReport:
    return token.verify_log()
