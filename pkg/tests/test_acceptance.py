"""End-to-end acceptance suite.  Each test prints one PASS/FAIL line for its criterion."""

from __future__ import annotations

import contextlib
import dataclasses
import json
import os
import random
import shutil
import subprocess
import sys
import time
from pathlib import Path

import pytest

import conftest
from conftest import (
    PIN,
    decode_capture,
    make_ca,
    make_org,
    run_issuance,
    scan,
    secret_patterns,
    transfer_party,
)
from softvault import attestation as at
from softvault import certkit, crypto, soft_tee
from softvault.attestation import Quote, QuoteCheck, QuoteType, generate_quote, verify_quote
from softvault.crypto import KeyAlgorithm
from softvault.errors import (
    ChainCorrupted,
    MalformedData,
    PckRejected,
    PeerSignatureInvalid,
    RollbackDetected,
    SealIdentityMismatch,
    SealPlatformMismatch,
)
from softvault.keyvault import LogStatus, Token
from softvault.protocols import (
    MemoryChannel,
    Message,
    MsgType,
    NodeType,
    TamperChannel,
    backup_restore,
    provision_initiator,
    provision_responder,
    transfer_initiator,
    transfer_responder,
)
from softvault.protocols.channel import run_pair_outcomes
from softvault.soft_tee import Enclave, PlatformSecret, SealPolicy, measure_enclave


@contextlib.contextmanager
def criterion(n: int, title: str):
    """Record PASS when the block completes, FAIL (and re-raise) otherwise."""
    notes: dict = {}
    try:
        yield notes
    except BaseException as exc:
        line = f"FAIL criterion {n}: {title} -- {type(exc).__name__}: {str(exc)[:200]}"
        conftest.ACCEPTANCE_RESULTS[n] = line
        print(line)
        raise
    detail = ", ".join(f"{k}={v}" for k, v in notes.items())
    line = f"PASS criterion {n}: {title}" + (f" ({detail})" if detail else "")
    conftest.ACCEPTANCE_RESULTS[n] = line
    print(line)


def blindctl(*argv, timeout=600) -> tuple[int, dict]:
    proc = subprocess.run([sys.executable, "-m", "softvault.blindctl", "--json", *argv],
                          capture_output=True, text=True, timeout=timeout)
    lines = proc.stdout.strip().splitlines()
    return proc.returncode, (json.loads(lines[-1]) if lines else {"stderr": proc.stderr})


# --- 1 ---------------------------------------------------------------------------

def test_c1_end_to_end_issuance(tmp_path):
    with criterion(1, "daemons + blindctl issue yields a verifiable, quoted certificate") as notes:
        root = tmp_path / "lab"
        t0 = time.monotonic()
        code, info = blindctl("lab", "init", "--dir", str(root), "--pin", PIN)
        assert code == 0, info
        try:
            code, out = blindctl("lab", "up", "--dir", str(root), "--nodes", "ias,pck,ca,website")
            assert code == 0, out
            website = info["nodes"]["website"]["dir"]
            code, out = blindctl("issue", "--node", website, "--ca", info["nodes"]["ca"]["address"],
                                 "--subject", "www.acceptance.example")
            elapsed = time.monotonic() - t0
            assert code == 0, out
            cert = certkit.BlindCert.from_armor(out["cert"])
            ca_cert = certkit.BlindCert.load(Path(info["nodes"]["ca"]["dir"]) / "ca.cert")
            assert certkit.verify_cert(cert, ca_cert)
            lab = conftest.Lab(str(root), info)
            code, status = blindctl("status", "--node", website)
            website_mr = bytes.fromhex(status["mrenclave"])
            v = certkit.inspect_cert_quote(cert, website_mr, lab.anchors())
            assert v, v.detail
            assert certkit.inspect_cert_quote(ca_cert, website_mr, lab.anchors())
            assert elapsed < 30, f"took {elapsed:.1f} s"
            notes["wall_s"] = round(elapsed, 2)
        finally:
            blindctl("lab", "down", "--dir", str(root))


# --- 2 ---------------------------------------------------------------------------

def test_c2_four_check_quote_suite(ias, manufacturer):
    with criterion(2, "each quote check isolated; 1000 single-byte mutations, 0 accepts") as notes:
        p = PlatformSecret.generate()
        qe = at.QuotingEnclave(p, ias.enroll(p.platform_id), manufacturer.issue_pck_cert(p))
        anchors = at.TrustAnchors(manufacturer.root_cert, ias, ias.public_key)
        image = soft_tee.default_enclave_image()
        good = Enclave(p, measure_enclave(image, svn=2))
        mr = good.measurement.mrenclave
        for qt in QuoteType:
            q = generate_quote(b"key", qt, good, qe)
            assert verify_quote(q, b"key", qt, anchors, expected_mrenclave=mr, min_svn=2)
            sig = bytearray(q.signature)
            sig[-1] ^= 1
            cases = {
                QuoteCheck.SIGNATURE_INVALID: (dataclasses.replace(q, signature=bytes(sig)),
                                               b"key", mr, 2),
                QuoteCheck.REPORT_DATA_MISMATCH: (q, b"other key", mr, 2),
                QuoteCheck.MRENCLAVE_MISMATCH: (
                    generate_quote(b"key", qt, Enclave(p, measure_enclave(image + b"\x90", svn=2)),
                                   qe), b"key", mr, 2),
                QuoteCheck.TCB_OUTDATED: (q, b"key", mr, 3),
            }
            for reason, (quote, data, expected, min_svn) in cases.items():
                v = verify_quote(quote, data, qt, anchors, expected_mrenclave=expected,
                                 min_svn=min_svn)
                assert v.failures == (reason,), (qt, reason, v)
        honest = {qt: generate_quote(b"key", qt, good, qe).to_bytes() for qt in QuoteType}
        rng = random.Random(2024)
        accepted = unparsable = 0
        for i in range(1000):
            qt = QuoteType.EPID if i % 2 else QuoteType.ECDSA
            raw = bytearray(honest[qt])
            pos = rng.randrange(len(raw))
            raw[pos] = (raw[pos] + rng.randint(1, 255)) % 256
            try:
                q = Quote.from_bytes(bytes(raw))
            except (MalformedData, ValueError):
                unparsable += 1
                continue
            if verify_quote(q, b"key", qt, anchors, expected_mrenclave=mr, min_svn=2):
                accepted += 1
        assert accepted == 0
        notes.update(mutations=1000, accepted=accepted, unparsable=unparsable)


# --- 3 ---------------------------------------------------------------------------

def test_c3_mitm_on_transfer(world, key_recorder):
    with criterion(3, "ephemeral-key swap aborts before key message, 100/100; capture clean") as notes:
        ca, ca_cert = make_ca(world)
        site, cdn = world.node("site"), world.node("cdn")
        site_cert, _ = run_issuance(world, ca, ca_cert, site, "site.example")
        cdn_cert, _ = run_issuance(world, ca, ca_cert, cdn, "cdn.example")
        capture: list[bytes] = []
        aborted = 0
        for trial in range(100):
            target = MsgType.TRANSFER_HELLO if trial % 2 == 0 else MsgType.TRANSFER_REPLY
            evil = crypto.public_bytes(crypto.generate_private(KeyAlgorithm.ECDH_P256))

            def swap(msg, target=target, evil=evil):
                if msg.type is target:
                    return Message(msg.type, msg.session_id, msg.step, dict(msg.fields, eph_pk=evil))
                return msg

            start = len(capture)
            a, b = MemoryChannel.pair(capture)
            if target is MsgType.TRANSFER_HELLO:
                a = TamperChannel(a, swap)
            else:
                b = TamperChannel(b, swap)
            left, right = run_pair_outcomes(
                lambda: transfer_initiator(a, transfer_party(world, site, site_cert)),
                lambda: transfer_responder(b, transfer_party(world, cdn, cdn_cert)))
            victim = right if target is MsgType.TRANSFER_HELLO else left
            types = [m.type for m in decode_capture(capture[start:])]
            if (isinstance(victim, PeerSignatureInvalid) and isinstance(left, Exception)
                    and isinstance(right, Exception) and MsgType.TRANSFER_KEY not in types):
                aborted += 1
        assert cdn.token.find_handle(site_cert.subject_public_key) is None
        patterns = key_recorder.patterns()
        for tok in (site.token, cdn.token, ca.token):
            patterns.update(secret_patterns(tok._objects.values()))
        hits = scan(capture, patterns)
        assert aborted == 100, f"{aborted}/100 aborted"
        assert hits == [], hits
        notes.update(aborted=f"{aborted}/100", frames=len(capture), secrets_scanned=len(patterns),
                     hits=len(hits))


# --- 4 ---------------------------------------------------------------------------

def test_c4_rogue_node(world):
    with criterion(4, "unsigned / foreign-signed PCK entries -> PckRejected 100/100; "
                      "signed entry succeeds") as notes:
        org = make_org(world)
        src, dst = world.node("src"), world.node("dst")
        org.sanction(src, dst)
        foreign_admin = world.node("foreign-admin")
        foreign = at.generate_org_keys(foreign_admin.token, PIN)
        rogues = [world.node(f"rogue{i}") for i in range(4)]
        src.token.generate_keypair(KeyAlgorithm.ECDSA_P256, "tls", PIN)
        rejected = 0
        for trial in range(100):
            rogue = rogues[trial % 4]
            draft = at.PckCacheEntry(rogue.platform_id, rogue.qe.pck_cert)
            if trial % 2 == 0:
                org.cache.put([draft])  # present but unsigned
            else:
                org.cache.put(at.sign_pck_cache([draft], foreign_admin.token, PIN, foreign.mpk))
            a, b = MemoryChannel.pair()
            if (trial // 2) % 2 == 0:
                left, right = run_pair_outcomes(
                    lambda: provision_initiator(a, org.party(world, src), NodeType.SENDER),
                    lambda: provision_responder(b, org.party(world, rogue)))
            else:
                left, right = run_pair_outcomes(
                    lambda: provision_initiator(a, org.party(world, rogue), NodeType.RECEIVER),
                    lambda: provision_responder(b, org.party(world, src)))
            if isinstance(left, PckRejected) and isinstance(right, PckRejected):
                rejected += 1
        for rogue in rogues:
            assert not [o for o in rogue.token.objects() if o.label == "tls"]
        # Properly signed entry: provisioning succeeds and signatures verify.
        h, pub, _ = src.token.generate_keypair(KeyAlgorithm.RSA2048, "tls-rsa", PIN)
        a, b = MemoryChannel.pair()
        left, right = run_pair_outcomes(
            lambda: provision_initiator(a, org.party(world, src), NodeType.SENDER),
            lambda: provision_responder(b, org.party(world, dst)))
        assert not isinstance(left, Exception) and not isinstance(right, Exception), (left, right)
        verified = 0
        for info in src.token.objects():
            if info.volatile or not info.public_part:
                continue
            handle = dst.token.find_handle(info.public_part)
            msg = os.urandom(32)
            sig = dst.token.sign(handle, msg, PIN)
            assert crypto.verify_signature(info.public_part, msg, sig)
            verified += 1
        assert rejected == 100, f"{rejected}/100 rejected"
        assert verified >= 2
        notes.update(rejected=f"{rejected}/100", transferred_keys_verified=verified)


# --- 5 ---------------------------------------------------------------------------

def test_c5_sealing_matrix():
    with criterion(5, "sealing matrix: only (same platform, same identity) unseals") as notes:
        p1, p2 = PlatformSecret.generate(), PlatformSecret.generate()
        build_a = measure_enclave(b"vault build A", signer=b"vendor")
        build_b = measure_enclave(b"vault build B", signer=b"vendor")
        other_signer = measure_enclave(b"vault build B", signer=b"someone else")
        sealer = Enclave(p1, build_a)

        def opens(blob, enclave) -> bool:
            try:
                return enclave.unseal(blob) == b"secret"
            except (SealIdentityMismatch, SealPlatformMismatch):
                return False

        cells = {}
        blob = sealer.seal(b"secret", SealPolicy.MRENCLAVE)
        for plat_name, plat in (("same", p1), ("different", p2)):
            for mr_name, meas in (("same", build_a), ("different", build_b)):
                cells[(plat_name, mr_name)] = opens(blob, Enclave(plat, meas))
        assert cells == {("same", "same"): True, ("same", "different"): False,
                         ("different", "same"): False, ("different", "different"): False}
        blob = sealer.seal(b"secret", SealPolicy.MRSIGNER)
        signer_cells = {
            ("same", "same-build"): opens(blob, Enclave(p1, build_a)),
            ("same", "same-signer"): opens(blob, Enclave(p1, build_b)),
            ("same", "other-signer"): opens(blob, Enclave(p1, other_signer)),
            ("different", "same-build"): opens(blob, Enclave(p2, build_a)),
            ("different", "same-signer"): opens(blob, Enclave(p2, build_b)),
        }
        assert signer_cells == {("same", "same-build"): True, ("same", "same-signer"): True,
                                ("same", "other-signer"): False,
                                ("different", "same-build"): False,
                                ("different", "same-signer"): False}
        notes["cells"] = len(cells) + len(signer_cells)


# --- 6 ---------------------------------------------------------------------------

def _journal_ends(data: bytes) -> list[int]:
    from softvault.keyvault import JOURNAL_MAGIC
    ends, pos = [], len(JOURNAL_MAGIC)
    while pos < len(data):
        pos += 4 + int.from_bytes(data[pos:pos + 4], "big")
        ends.append(pos)
    return ends


def test_c6_rollback(tmp_path):
    with criterion(6, "50 snapshot restores -> RollbackDetected; truncation and mutation "
                      "give distinct errors; intact verifies") as notes:
        enclave = Enclave.default(PlatformSecret.generate())
        path = tmp_path / "vault.sealed"
        tok = Token.init(path, PIN, enclave, pin_delay=0)
        files = (path, Path(str(path) + ".journal"))
        snaps = []
        handle, _, _ = tok.generate_keypair(KeyAlgorithm.ECDSA_P256, "k", PIN, attest=False)
        for i in range(80):
            snaps.append({p: p.read_bytes() for p in files})
            if i % 3 == 0:
                tok.generate_keypair(KeyAlgorithm.ECDSA_P256, f"k{i}", PIN, attest=False)
            else:
                tok.sign(handle, f"m{i}".encode(), PIN)
        tok.close()
        current = {p: p.read_bytes() for p in files}

        def put(snapshot):
            for p, data in snapshot.items():
                p.write_bytes(data)

        rng = random.Random(7)
        detected = 0
        for snap in rng.sample(snaps, 50):
            put(snap)
            report, _ = Token.inspect(path, enclave)
            try:
                Token.open(path, PIN, enclave, pin_delay=0).close()
                opened = True
            except RollbackDetected:
                opened = False
            if report.status is LogStatus.ROLLBACK_DETECTED and not opened:
                detected += 1
        put(current)
        journal = files[1]
        ends = _journal_ends(current[journal])
        journal.write_bytes(current[journal][:ends[-4]])
        truncated = Token.inspect(path, enclave)[0].status
        with pytest.raises(RollbackDetected):
            Token.open(path, PIN, enclave, pin_delay=0)
        put(current)
        data = bytearray(current[journal])
        # Flip a byte inside an early record's ciphertext.
        data[ends[2] + 10] ^= 0x01
        journal.write_bytes(bytes(data))
        mutated = Token.inspect(path, enclave)[0].status
        with pytest.raises(ChainCorrupted):
            Token.open(path, PIN, enclave, pin_delay=0)
        put(current)
        intact, log = Token.inspect(path, enclave)
        assert detected == 50, f"{detected}/50"
        assert truncated is LogStatus.ROLLBACK_DETECTED
        assert mutated is LogStatus.CHAIN_CORRUPTED
        assert truncated is not mutated
        assert intact.ok and len(log) == 81
        Token.open(path, PIN, enclave, pin_delay=0).close()
        notes.update(rollbacks=f"{detected}/50", truncation=truncated.value,
                     mutation=mutated.value, intact=intact.status.value)


# --- 7 ---------------------------------------------------------------------------

def test_c7_key_confinement(world, key_recorder, tmp_path):
    with criterion(7, "no private-key bytes in any persisted file or captured frame") as notes:
        capture: list[bytes] = []
        ca, ca_cert = make_ca(world)
        site, cdn = world.node("site"), world.node("cdn")
        backup = world.node("backup")
        org = make_org(world)
        org.sanction(site, backup)
        site_cert, _ = run_issuance(world, ca, ca_cert, site, "site.example", capture=capture)
        cdn_cert, _ = run_issuance(world, ca, ca_cert, cdn, "cdn.example", capture=capture)
        a, b = MemoryChannel.pair(capture)
        left, right = run_pair_outcomes(
            lambda: transfer_initiator(a, transfer_party(world, site, site_cert)),
            lambda: transfer_responder(b, transfer_party(world, cdn, cdn_cert)))
        assert not isinstance(left, Exception) and not isinstance(right, Exception)
        site.token.generate_keypair(KeyAlgorithm.ECDSA_P256, "extra", PIN)
        restored = backup_restore(org.party(world, site), org.party(world, backup), capture)
        assert restored
        ca_cert.save(tmp_path / "exported-ca.cert")
        site.token.export_log(tmp_path / "site-log.jsonl")
        at.PckCache(org.cache._entries.values()).save(tmp_path / "pck.bin")
        world.close()

        patterns = key_recorder.patterns()
        for n in world.nodes:
            patterns.update(secret_patterns(n.token._objects.values()))
        files = [p for p in Path(world.tmp).rglob("*") if p.is_file()]
        blobs = [p.read_bytes() for p in files]
        hits = scan(blobs + capture, patterns)
        # Positive control: the scanner does find a key that is written in the clear.
        some_key = next(iter(patterns))
        assert scan([b"junk" + some_key + b"junk"], patterns)
        kinds = {m.type for m in decode_capture(capture)}
        assert {MsgType.ISSUE_REQUEST, MsgType.TRANSFER_KEY, MsgType.PROVISION_KEYS} <= kinds
        assert hits == [], hits
        notes.update(files=len(files), frames=len(capture), secrets=len(patterns),
                     hits=len(hits))


# --- 8 ---------------------------------------------------------------------------

def test_c8_benchmark(tmp_path):
    with criterion(8, "bench >= 1000 runs: sign ratio in (0, 3), keygen ratio in "
                      "[0.8, 1.25], < 10 min") as notes:
        t0 = time.monotonic()
        jsonl = tmp_path / "bench.jsonl"
        code, out = blindctl("bench", "--runs", "1000", "--ops", "keygen,sign",
                             "--jsonl", str(jsonl), timeout=900)
        elapsed = time.monotonic() - t0
        assert code == 0, out
        reports = {(r["operation"], r["mode"]): r for r in out["reports"]}
        for op in ("KEYGEN_RSA2048", "SIGN_RSA2048"):
            for mode in ("VAULT", "DIRECT"):
                r = reports[(op, mode)]
                assert r["runs"] >= 1000
                assert 0 < r["min_ms"] <= r["median_ms"] <= r["max_ms"]
        sign, keygen = out["ratios"]["SIGN_RSA2048"], out["ratios"]["KEYGEN_RSA2048"]
        notes.update(sign_ratio=round(sign, 3), keygen_ratio=round(keygen, 3),
                     runtime_s=round(elapsed, 1))
        assert len(jsonl.read_text().splitlines()) == 4
        assert 0 < sign < 3, f"sign ratio {sign:.3f}"
        assert 0.8 <= keygen <= 1.25, f"keygen ratio {keygen:.3f}"
        assert elapsed < 600


# --- 9 ---------------------------------------------------------------------------

def test_c9_backup_drill(world):
    with criterion(9, "backup, destroy source, restore on sanctioned platform; "
                      "unsanctioned restore fails") as notes:
        org = make_org(world)
        source, backup, stranger = world.node("source"), world.node("backup"), world.node("stranger")
        org.sanction(source, backup)
        pubs = [source.token.generate_keypair(alg, f"key{i}", PIN)[1]
                for i, alg in enumerate([KeyAlgorithm.RSA2048, KeyAlgorithm.ECDSA_P256,
                                         KeyAlgorithm.ECDSA_P256])]
        restored = backup_restore(org.party(world, source), org.party(world, backup))
        assert len(restored) == 3
        source_party = org.party(world, source)
        # Destroy the source vault entirely.
        source.token.close()
        shutil.rmtree(os.path.dirname(source.path))
        assert not os.path.exists(source.path)
        signed = 0
        for pub in pubs:
            h = backup.token.find_handle(pub)
            msg = os.urandom(48)
            assert crypto.verify_signature(pub, msg, backup.token.sign(h, msg, PIN))
            signed += 1
        # The backup can pass the keys on to another sanctioned machine, not to a stranger.
        a, b = MemoryChannel.pair()
        left, right = run_pair_outcomes(
            lambda: provision_initiator(a, org.party(world, backup), NodeType.SENDER),
            lambda: provision_responder(b, org.party(world, stranger)))
        assert isinstance(left, PckRejected) and isinstance(right, PckRejected)
        assert all(stranger.token.find_handle(p) is None for p in pubs)
        assert source_party.platform_id == source.platform_id
        notes.update(restored=len(restored), signatures_verified=signed,
                     unsanctioned="PckRejected")
