from __future__ import annotations

import json
import os
import random
import shutil
import threading
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

import oracles
from softvault import keyvault
from softvault.attestation import QuoteType, make_quoter, verify_quote
from softvault.crypto import KeyAlgorithm
from softvault.errors import (
    AlreadyInitialized,
    AuthFailure,
    ChainCorrupted,
    CounterWriteFailure,
    IncompleteOperation,
    NonExtractable,
    ReservedMessage,
    RollbackDetected,
    UnknownHandle,
    UnsupportedAlgorithm,
    VaultLocked,
    WrongKeyType,
)
from softvault.keyvault import AuditLog, LogStatus, Token, check_log
from softvault.soft_tee import Enclave, PlatformSecret

from conftest import PIN


@pytest.fixture
def enclave():
    return Enclave.default(PlatformSecret.generate())


@pytest.fixture
def vault(tmp_path, enclave):
    tok = Token.init(tmp_path / "v.sealed", PIN, enclave, pin_delay=0)
    yield tok
    tok.close()


def reopen(tok: Token, **kw) -> Token:
    tok.close()
    return Token.open(tok.path, PIN, tok.enclave, pin_delay=0, **kw)


# Everything except the counter: what an attacker with disk access can swap back.
def snapshot(tok: Token) -> dict[str, bytes]:
    return {p: Path(p).read_bytes() for p in (str(tok.path), str(tok.journal_path))}


def restore(tok: Token, snap: dict[str, bytes]) -> None:
    for p, data in snap.items():
        Path(p).write_bytes(data)
    tok.pending_path.unlink(missing_ok=True)


# --- lifecycle -------------------------------------------------------------------

def test_init_empty_and_twice(tmp_path, enclave):
    path = tmp_path / "t.sealed"
    tok = Token.init(path, PIN, enclave, pin_delay=0)
    assert tok.objects() == [] and len(tok.log) == 0
    assert keyvault.read_counter(tok.counter_path) == (0, keyvault.GENESIS_HASH)
    tok.close()
    with pytest.raises(AlreadyInitialized):
        Token.init(path, PIN, enclave, pin_delay=0)
    Token.init(path, "new", enclave, overwrite=True, pin_delay=0).close()


def test_wrong_pin(vault):
    vault.close()
    with pytest.raises(AuthFailure):
        Token.open(vault.path, "0000", vault.enclave, pin_delay=0)


def test_pin_failure_mutates_nothing(vault):
    h, _, _ = vault.generate_keypair("ecdsa_p256", "k", PIN)
    n = len(vault.log)
    for _ in range(4):
        with pytest.raises(AuthFailure):
            vault.sign(h, b"m", "bad")
        with pytest.raises(AuthFailure):
            vault.destroy_object(h, "bad")
    assert len(vault.log) == n and [o.handle for o in vault.objects()] == [h]


def test_single_opener(vault):
    with pytest.raises(VaultLocked):
        Token.open(vault.path, PIN, vault.enclave, pin_delay=0)


def test_other_platform_cannot_open(vault):
    vault.close()
    from softvault.errors import SealPlatformMismatch
    with pytest.raises(SealPlatformMismatch):
        Token.open(vault.path, PIN, Enclave.default(PlatformSecret.generate()), pin_delay=0)


def test_files_are_private(vault):
    vault.generate_keypair("ecdsa_p256", "k", PIN)
    for f in vault.files():
        assert f.stat().st_mode & 0o077 == 0, f


# --- keys ---------------------------------------------------------------------------

def test_generate_rsa_quote_verifies(world):
    n = world.node("kv")
    h, pub, q = n.token.generate_keypair(KeyAlgorithm.RSA2048, "web", PIN)
    assert verify_quote(q, pub, QuoteType.EPID, world.anchors, expected_mrenclave=n.mrenclave)
    h2, pub2, _ = n.token.generate_keypair("rsa2048", "web2", PIN)
    assert h != h2 and pub != pub2
    assert oracles.rsa_public_numbers(pub)[0].bit_length() == 2048


def test_ecdsa_quote_type(world):
    n = world.node("kv")
    _, pub, q = n.token.generate_keypair("ecdsa_p256", "k", PIN, quote_type=QuoteType.ECDSA)
    assert q.quote_type is QuoteType.ECDSA
    assert verify_quote(q, pub, QuoteType.ECDSA, world.anchors)


@pytest.mark.parametrize("alg", ["rsa2048", "ecdsa_p256"])
def test_signature_checked_by_oracle(vault, alg):
    h, pub, q = vault.generate_keypair(alg, "k", PIN)
    assert q is None  # token without a quoting enclave
    msg = os.urandom(100)
    sig = vault.sign(h, msg, PIN)
    assert oracles.verify_any(pub, msg, sig)
    assert not oracles.verify_any(pub, msg + b"!", sig)


def test_unsupported_algorithm(vault):
    with pytest.raises(UnsupportedAlgorithm):
        vault.generate_keypair("dsa1024", "k", PIN)
    with pytest.raises(UnsupportedAlgorithm):
        vault.generate_keypair(KeyAlgorithm.SECRET, "k", PIN)
    assert vault.log.entries[-1].api_name == "generate_keypair"


def test_ecdh_cannot_sign(vault):
    h, _, _ = vault.generate_keypair("ecdh_p256", "k", PIN)
    with pytest.raises(WrongKeyType):
        vault.sign(h, b"m", PIN)
    with pytest.raises(UnknownHandle):
        vault.sign(999, b"m", PIN)


def test_reserved_prefix(vault):
    h, _, _ = vault.generate_keypair("ecdsa_p256", "k", PIN)
    with pytest.raises(ReservedMessage):
        vault.sign(h, keyvault.RESERVED_PREFIX + b"x", PIN)


def test_export_always_fails_and_is_logged(vault):
    h, _, _ = vault.generate_keypair("rsa2048", "k", PIN)
    for handle in (h, 12345):
        n = len(vault.log)
        with pytest.raises((NonExtractable, UnknownHandle)):
            vault.export_private(handle, PIN)
        assert len(vault.log) == n + 1
        assert vault.log.entries[-1].api_name == "export_private"
    with pytest.raises(NonExtractable):
        keyvault.export_private(vault, h, PIN)


def test_keys_survive_reopen(vault):
    h, pub, _ = vault.generate_keypair("ecdsa_p256", "k", PIN)
    vault.attach_cert(h, b"CERT", PIN)
    tok = reopen(vault)
    try:
        assert tok.public_key(h) == pub and tok.certificate(h) == b"CERT"
        assert oracles.ecdsa_verify(pub, b"m", tok.sign(h, b"m", PIN))
        assert tok.verify_log()
    finally:
        tok.close()


def test_destroy(vault):
    h, pub, _ = vault.generate_keypair("ecdsa_p256", "k", PIN)
    vault.destroy_object(h, PIN)
    assert vault.find_handle(pub) is None
    with pytest.raises(UnknownHandle):
        vault.sign(h, b"m", PIN)


def test_ephemeral_keys_not_persisted(vault):
    h, _, _ = vault.generate_keypair("ecdh_p256", "eph", PIN, ephemeral=True)
    assert vault.objects()[0].volatile
    tok = reopen(vault)
    try:
        assert tok.objects() == []
    finally:
        tok.close()


def test_shared_key_both_sides(enclave):
    a = Token.ephemeral(PIN, enclave, boundary=True)
    b = Token.ephemeral(PIN, enclave, boundary=True)
    ha, pa, _ = a.generate_keypair("ecdh_p256", "e", PIN, ephemeral=True)
    hb, pb, _ = b.generate_keypair("ecdh_p256", "e", PIN, ephemeral=True)
    ka = a.derive_shared_key(ha, pb, b"T", PIN)
    kb = b.derive_shared_key(hb, pa, b"T", PIN)
    ct = a.encrypt(ka, b"hello", b"aad", PIN)
    assert b.decrypt(kb, ct, b"aad", PIN) == b"hello"
    # Ephemeral private key is gone after derivation.
    with pytest.raises(UnknownHandle):
        a.derive_shared_key(ha, pb, b"T", PIN)


# --- logging -------------------------------------------------------------------------

def test_thousand_signs_thousand_entries(vault):
    h, _, _ = vault.generate_keypair("ecdsa_p256", "k", PIN)
    before = len(vault.log)
    for i in range(1000):
        vault.sign(h, i.to_bytes(4, "big"), PIN)
    assert len(vault.log) == before + 1000
    assert keyvault.read_counter(vault.counter_path)[0] == before + 1000
    assert vault.verify_log()


def test_every_operation_logs_once(vault):
    ops = [
        lambda: vault.generate_keypair("ecdsa_p256", "a", PIN),
        lambda: vault.sign(1, b"x", PIN),
        lambda: vault.sign(77, b"x", PIN),
        lambda: vault.attach_cert(1, b"c", PIN),
        lambda: vault.export_private(1, PIN),
        lambda: vault.generate_keypair("nope", "a", PIN),
        lambda: vault.destroy_object(1, PIN),
        lambda: vault.destroy_object(1, PIN),
    ]
    for op in ops:
        n = len(vault.log)
        try:
            op()
        except Exception:
            pass
        assert len(vault.log) == n + 1
    results = [json.loads(json.dumps(e.to_record())) for e in vault.log.entries]
    assert [r["api_name"] for r in results][:2] == ["generate_keypair", "sign"]


def test_params_hash_hides_message(vault):
    h, _, _ = vault.generate_keypair("ecdsa_p256", "k", PIN)
    vault.sign(h, b"TOP-SECRET-MESSAGE", PIN)
    text = vault.log.encoded() + b"".join(f.read_bytes() for f in vault.files())
    assert b"TOP-SECRET-MESSAGE" not in text


def test_chain_of_three_recomputes():
    log = AuditLog()
    for i in range(3):
        log.append("op", {"i": i})
    prev = keyvault.GENESIS_HASH
    for e in log.entries:
        assert e.prev_hash == prev
        prev = oracles.sha256(e.encode())
    assert log.head_hash == prev
    assert check_log(log.entries, 3, prev)
    assert check_log(log.entries[:2], 3, prev).status is LogStatus.ROLLBACK_DETECTED
    mutated = list(log.entries)
    mutated[1] = keyvault.LogEntry(2, 0, "evil", b"\x00" * 32, mutated[1].prev_hash)
    assert check_log(mutated, 3, prev).status is LogStatus.CHAIN_CORRUPTED


def test_export_log(vault, tmp_path):
    vault.generate_keypair("ecdsa_p256", "k", PIN)
    vault.export_log(tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    entries = [keyvault.LogEntry.from_record(json.loads(x)) for x in lines]
    assert entries == vault.log.entries


def test_append_log_direct(vault):
    head = keyvault.append_log(vault, "custom", {"a": 1})
    assert head == vault.log.head_hash and keyvault.verify_log(vault)


# --- at-rest integrity -------------------------------------------------------------

def populate(tok: Token, n: int) -> None:
    h, _, _ = tok.generate_keypair("ecdsa_p256", "k", PIN)
    for i in range(n):
        tok.sign(h, bytes([i]), PIN)


def journal_ends(data: bytes) -> list[int]:
    """End offset of every length-prefixed journal record."""
    ends, pos = [], len(keyvault.JOURNAL_MAGIC)
    while pos < len(data):
        pos += 4 + int.from_bytes(data[pos:pos + 4], "big")
        ends.append(pos)
    return ends


def test_intact_verifies(vault):
    populate(vault, 5)
    vault.close()
    report, log = Token.inspect(vault.path, vault.enclave)
    assert report.ok and len(log) == 6


def test_truncate_journal_is_rollback(vault):
    populate(vault, 5)
    vault.close()
    data = vault.journal_path.read_bytes()
    vault.journal_path.write_bytes(data[:journal_ends(data)[-2]])
    report, _ = Token.inspect(vault.path, vault.enclave)
    assert report.status is LogStatus.ROLLBACK_DETECTED
    with pytest.raises(RollbackDetected):
        Token.open(vault.path, PIN, vault.enclave, pin_delay=0)


def test_mutate_middle_entry_is_corruption(vault):
    populate(vault, 5)
    vault.close()
    data = bytearray(vault.journal_path.read_bytes())
    data[len(data) // 2] ^= 0x10
    vault.journal_path.write_bytes(bytes(data))
    with pytest.raises(ChainCorrupted):
        Token.open(vault.path, PIN, vault.enclave, pin_delay=0)


def test_missing_counter_is_rollback(vault):
    populate(vault, 1)
    vault.close()
    vault.counter_path.unlink()
    with pytest.raises(RollbackDetected):
        Token.open(vault.path, PIN, vault.enclave, pin_delay=0)


def test_old_state_file_is_rollback(vault):
    """Swapping back only the key-state file after a key change is caught too."""
    old = vault.path.read_bytes()
    vault.generate_keypair("ecdsa_p256", "k", PIN)
    vault.close()
    vault.path.write_bytes(old)
    with pytest.raises(RollbackDetected):
        Token.open(vault.path, PIN, vault.enclave, pin_delay=0)


@settings(max_examples=8, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(ops=st.integers(min_value=2, max_value=12), data=st.data())
def test_any_older_snapshot_detected(tmp_path, ops, data):
    enclave = Enclave.default(PlatformSecret.generate())
    path = tmp_path / f"p{os.urandom(6).hex()}.sealed"
    tok = Token.init(path, PIN, enclave, pin_delay=0)
    snaps = []
    for i in range(ops):
        snaps.append(snapshot(tok))
        if i % 3 == 0:
            tok.generate_keypair("ecdsa_p256", f"k{i}", PIN)
        else:
            tok.sign(1, bytes([i]), PIN)
    tok.close()
    snap = data.draw(st.sampled_from(snaps))
    restore(tok, snap)
    report, _ = Token.inspect(path, enclave)
    assert report.status is LogStatus.ROLLBACK_DETECTED


def test_counter_write_failure_aborts(vault):
    h, _, _ = vault.generate_keypair("ecdsa_p256", "k", PIN)
    n = len(vault.log)
    blocker = Path(str(vault.counter_path) + ".tmp")
    blocker.mkdir()
    try:
        with pytest.raises(CounterWriteFailure):
            vault.generate_keypair("ecdsa_p256", "k2", PIN)
        assert len(vault.log) == n and len(vault.objects()) == 1
    finally:
        blocker.rmdir()
    vault.sign(h, b"after", PIN)
    tok = reopen(vault)
    try:
        assert tok.verify_log() and len(tok.log) == n + 1
    finally:
        tok.close()


# --- crash injection ------------------------------------------------------------------

class Crash(BaseException):
    pass


def crash_at(point: str):
    def hook(p):
        if p == point:
            raise Crash(p)
    return hook


@pytest.mark.parametrize("point", ["before_journal", "before_counter"])
def test_crash_before_commit_is_clean(vault, point):
    vault.generate_keypair("ecdsa_p256", "k", PIN)
    n = len(vault.log)
    vault.fault = crash_at(point)
    with pytest.raises(Crash):
        vault.generate_keypair("ecdsa_p256", "k2", PIN)
    tok = reopen(vault)
    try:
        assert len(tok.log) == n and len(tok.objects()) == 1 and tok.verify_log()
        assert not tok.pending_path.exists()
        tok.sign(1, b"ok", PIN)
    finally:
        tok.close()


def test_crash_between_counter_and_state(vault):
    vault.generate_keypair("ecdsa_p256", "k", PIN)
    vault.fault = crash_at("after_counter")
    with pytest.raises(Crash):
        vault.generate_keypair("ecdsa_p256", "k2", PIN)
    vault.close()
    report, _ = Token.inspect(vault.path, vault.enclave)
    assert report.status is LogStatus.INCOMPLETE_OPERATION
    with pytest.raises(IncompleteOperation):
        Token.open(vault.path, PIN, vault.enclave, pin_delay=0)
    tok = Token.open(vault.path, PIN, vault.enclave, pin_delay=0, recover=True)
    try:
        assert len(tok.objects()) == 2 and tok.verify_log()
    finally:
        tok.close()


def test_crash_after_counter_without_state_change(vault):
    h, _, _ = vault.generate_keypair("ecdsa_p256", "k", PIN)
    vault.fault = crash_at("after_counter")
    with pytest.raises(Crash):
        vault.sign(h, b"m", PIN)
    tok = reopen(vault)
    try:
        assert tok.verify_log() and len(tok.log) == 2
    finally:
        tok.close()


@settings(max_examples=12, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(steps=st.lists(st.sampled_from(["gen", "sign", "destroy"]), min_size=1, max_size=6),
       point=st.sampled_from(["before_journal", "before_counter", "after_counter"]))
def test_crash_never_silently_diverges(tmp_path, steps, point):
    enclave = Enclave.default(PlatformSecret.generate())
    path = tmp_path / f"c{os.urandom(6).hex()}.sealed"
    tok = Token.init(path, PIN, enclave, pin_delay=0)
    tok.generate_keypair("ecdsa_p256", "base", PIN)
    for s in steps[:-1]:
        _apply(tok, s)
    before = {o.handle for o in tok.objects()}
    tok.fault = crash_at(point)
    try:
        _apply(tok, steps[-1])
    except Crash:
        pass
    tok.close()
    report, _ = Token.inspect(path, enclave)
    assert report.status in (LogStatus.OK, LogStatus.INCOMPLETE_OPERATION)
    again = Token.open(path, PIN, enclave, pin_delay=0, recover=True)
    try:
        assert again.verify_log()
        handles = {o.handle for o in again.objects()}
        # Either the interrupted operation is fully there or fully absent.
        assert len(handles ^ before) <= 1
    finally:
        again.close()


def _apply(tok: Token, step: str) -> set[int]:
    handles = {o.handle for o in tok.objects()}
    if step == "gen":
        h, _, _ = tok.generate_keypair("ecdsa_p256", "k", PIN)
        return handles | {h}
    if step == "sign":
        tok.sign(min(handles), b"m", PIN)
        return handles
    victim = max(handles)
    if victim == min(handles):
        tok.sign(victim, b"m", PIN)
        return handles
    tok.destroy_object(victim, PIN)
    return handles - {victim}


# --- concurrency ----------------------------------------------------------------------

def test_threads_serialize(vault):
    h, pub, _ = vault.generate_keypair("ecdsa_p256", "k", PIN)
    errors = []

    def worker(tid):
        try:
            for i in range(25):
                msg = f"{tid}:{i}".encode()
                assert oracles.ecdsa_verify(pub, msg, vault.sign(h, msg, PIN))
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert len(vault.log) == 1 + 8 * 25 and vault.verify_log()


def test_directory_copy_on_other_host_fails(vault, tmp_path):
    """A full copy of the vault directory is useless on a different platform."""
    vault.generate_keypair("ecdsa_p256", "k", PIN)
    vault.close()
    dst = tmp_path / "copy"
    dst.mkdir()
    for f in vault.files():
        shutil.copy(f, dst / f.name)
    from softvault.errors import SealPlatformMismatch
    with pytest.raises(SealPlatformMismatch):
        Token.open(dst / vault.path.name, PIN, Enclave.default(PlatformSecret.generate()),
                   pin_delay=0)


def test_quoter_uses_token_enclave(world):
    n = world.node("q")
    quoter = make_quoter(n.enclave, n.qe, QuoteType.ECDSA)
    assert quoter.default_type is QuoteType.ECDSA
