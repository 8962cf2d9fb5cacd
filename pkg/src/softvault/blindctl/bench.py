"""Timing harness: the same RSA-2048 work through the vault and around it.

VAULT mode goes through a persistent token: PIN check, audit-log entry,
journal fsync and counter commit around every call.  DIRECT mode uses a token
with the boundary switched off, so it runs the very same key generation and
signing code with none of that bookkeeping.  That models a plain software
token as the baseline.

Modes are interleaved run by run so that slow drift of the machine (thermal,
page cache, other tenants) hits both sides equally.
"""

from __future__ import annotations

import enum
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from ..crypto import KeyAlgorithm
from ..keyvault import Token
from ..soft_tee import Enclave, PlatformSecret

WARMUP = 10
BENCH_PIN = "bench-pin"
MESSAGE = b"softvault benchmark payload " * 2


class Mode(str, enum.Enum):
    VAULT = "VAULT"
    DIRECT = "DIRECT"


class Operation(str, enum.Enum):
    KEYGEN_RSA2048 = "KEYGEN_RSA2048"
    SIGN_RSA2048 = "SIGN_RSA2048"
    ISSUANCE_E2E = "ISSUANCE_E2E"

    @classmethod
    def parse(cls, name: str) -> "Operation":
        key = name.strip().upper().replace("-", "_")
        aliases = {"KEYGEN": "KEYGEN_RSA2048", "SIGN": "SIGN_RSA2048", "ISSUANCE": "ISSUANCE_E2E"}
        return cls(aliases.get(key, key))


# Published reference timings (ms) for the enclave vault vs. a software token.
# Recorded for comparison only; absolute numbers depend on hardware.
REFERENCE = {
    Operation.KEYGEN_RSA2048: {Mode.VAULT: (74.0, 75.0, 77.0), Mode.DIRECT: (74.5, 76.0, 79.0)},
    Operation.SIGN_RSA2048: {Mode.VAULT: (0.862, 0.871, 0.878), Mode.DIRECT: (0.66, 0.67, 0.681)},
}


@dataclass
class BenchReport:
    operation: Operation
    mode: Mode
    runs: int
    min_ms: float
    median_ms: float
    max_ms: float
    durations_ms: list[float] = field(default_factory=list, repr=False)

    @classmethod
    def from_durations(cls, operation: Operation, mode: Mode,
                       durations_ms: list[float]) -> "BenchReport":
        if not durations_ms:
            raise ValueError("a report needs at least one run")
        return cls(operation, mode, len(durations_ms), min(durations_ms),
                   statistics.median(durations_ms), max(durations_ms), list(durations_ms))

    def record(self) -> dict:
        return {"operation": self.operation.value, "mode": self.mode.value, "runs": self.runs,
                "min_ms": round(self.min_ms, 4), "median_ms": round(self.median_ms, 4),
                "max_ms": round(self.max_ms, 4)}


def overhead_ratio(reports: list[BenchReport], operation: Operation) -> float | None:
    """Median VAULT time over median DIRECT time."""
    by_mode = {r.mode: r for r in reports if r.operation is operation}
    if Mode.VAULT not in by_mode or Mode.DIRECT not in by_mode:
        return None
    return by_mode[Mode.VAULT].median_ms / by_mode[Mode.DIRECT].median_ms


# --- workloads ---------------------------------------------------------------

class _Workload:
    """Per-mode fixture exposing ``run()`` (timed) and ``after()`` (untimed cleanup)."""

    token: Token

    def run(self) -> None:
        raise NotImplementedError

    def after(self) -> None:
        pass

    def close(self) -> None:
        self.token.close()


def _token(mode: Mode, workdir: Path, name: str, enclave: Enclave, quoter=None) -> Token:
    if mode is Mode.VAULT:
        return Token.init(workdir / f"{name}.sealed", BENCH_PIN, enclave, quoter=quoter,
                          pin_delay=0)
    return Token.ephemeral(BENCH_PIN, enclave, quoter=quoter, boundary=False)


class _Keygen(_Workload):
    def __init__(self, mode: Mode, workdir: Path, enclave: Enclave):
        self.token = _token(mode, workdir, "keygen", enclave)
        self.handle = None

    def run(self) -> None:
        self.handle, _, _ = self.token.generate_keypair(KeyAlgorithm.RSA2048, "bench", BENCH_PIN,
                                                        attest=False)

    def after(self) -> None:
        # Keep the vault the same size for every run.
        self.token.destroy_object(self.handle, BENCH_PIN)


class _Sign(_Workload):
    def __init__(self, mode: Mode, workdir: Path, enclave: Enclave):
        self.token = _token(mode, workdir, "sign", enclave)
        self.handle, _, _ = self.token.generate_keypair(KeyAlgorithm.RSA2048, "bench", BENCH_PIN,
                                                        attest=False)

    def run(self) -> None:
        self.token.sign(self.handle, MESSAGE, BENCH_PIN)


class _Issuance(_Workload):
    """A full in-process issuance: CA fetch, quote checks, CSR, signing, verification.

    Quotes are needed on both sides, so DIRECT mode here keeps the in-memory
    boundary but drops persistence (no sealing, journal or counter writes).
    """

    def __init__(self, mode: Mode, workdir: Path, enclave: Enclave):
        from ..attestation import (
            AvrCache, Manufacturer, QuotingEnclave, TrustAnchors, VerificationService, make_quoter)
        from ..certkit import self_sign
        from ..protocols.issuance import CertificateAuthority

        ias = VerificationService.create()
        manufacturer = Manufacturer.create()
        self.anchors = TrustAnchors(manufacturer.root_cert, ias, ias.public_key, AvrCache())
        tokens = []
        for name in ("ca", "website"):
            platform = PlatformSecret.generate()
            enc = Enclave(platform, enclave.measurement)
            qe = QuotingEnclave(platform, ias.enroll(platform.platform_id),
                                manufacturer.issue_pck_cert(platform))
            quoter = make_quoter(enc, qe)
            if mode is Mode.VAULT:
                tokens.append(Token.init(workdir / f"issue-{name}.sealed", BENCH_PIN, enc,
                                         quoter=quoter, pin_delay=0))
            else:
                tokens.append(Token.ephemeral(BENCH_PIN, enc, quoter=quoter, boundary=True))
        self.ca_token, self.token = tokens
        self.mrenclave = enclave.measurement.mrenclave
        ca_cert = self_sign("Bench CA", self.ca_token, BENCH_PIN)
        self.ca = CertificateAuthority(self.ca_token, BENCH_PIN, ca_cert, self.anchors,
                                       expected_mrenclave=self.mrenclave)
        self.cert = None

    def run(self) -> None:
        from ..protocols.channel import MemoryChannel, run_pair
        from ..protocols.issuance import issuance_ca, issuance_website

        a, b = MemoryChannel.pair()
        self.cert, _ = run_pair(
            lambda: issuance_website(a, self.token, BENCH_PIN, "bench.example", self.anchors,
                                     self.mrenclave),
            lambda: issuance_ca(b, self.ca))

    def after(self) -> None:
        h = self.token.find_handle(self.cert.subject_public_key)
        self.token.destroy_object(h, BENCH_PIN)

    def close(self) -> None:
        self.token.close()
        self.ca_token.close()


_WORKLOADS = {
    Operation.KEYGEN_RSA2048: _Keygen,
    Operation.SIGN_RSA2048: _Sign,
    Operation.ISSUANCE_E2E: _Issuance,
}


def bench_operation(operation: Operation, runs: int, warmup: int = WARMUP,
                    workdir: str | Path | None = None,
                    progress: Callable[[Operation, int, int], None] | None = None
                    ) -> list[BenchReport]:
    """Time ``runs`` calls of ``operation`` in both modes after ``warmup`` discarded calls."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        enclave = Enclave.default(PlatformSecret.generate())
        work = {mode: _WORKLOADS[operation](mode, Path(tmp), enclave) for mode in Mode}
        samples: dict[Mode, list[float]] = {mode: [] for mode in Mode}
        try:
            for i in range(warmup + runs):
                order = (Mode.VAULT, Mode.DIRECT) if i % 2 == 0 else (Mode.DIRECT, Mode.VAULT)
                for mode in order:
                    w = work[mode]
                    t0 = time.perf_counter_ns()
                    w.run()
                    elapsed = (time.perf_counter_ns() - t0) / 1e6
                    w.after()
                    if i >= warmup:
                        samples[mode].append(elapsed)
                if progress is not None:
                    progress(operation, i + 1, warmup + runs)
        finally:
            for w in work.values():
                w.close()
    return [BenchReport.from_durations(operation, mode, samples[mode]) for mode in Mode]


def run_bench(operations: list[Operation], runs: int, warmup: int = WARMUP,
              workdir: str | Path | None = None, progress=None) -> list[BenchReport]:
    out: list[BenchReport] = []
    for op in operations:
        out.extend(bench_operation(op, runs, warmup, workdir, progress))
    return out


def format_table(reports: list[BenchReport]) -> str:
    header = f"{'operation':<16} {'mode':<7} {'runs':>6} {'min ms':>10} {'median ms':>10} {'max ms':>10}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(f"{r.operation.value:<16} {r.mode.value:<7} {r.runs:>6} "
                     f"{r.min_ms:>10.3f} {r.median_ms:>10.3f} {r.max_ms:>10.3f}")
    lines.append("")
    for op in dict.fromkeys(r.operation for r in reports):
        ratio = overhead_ratio(reports, op)
        if ratio is None:
            continue
        line = f"{op.value}: VAULT/DIRECT median ratio {ratio:.3f}"
        ref = REFERENCE.get(op)
        if ref:
            line += f" (reference {ref[Mode.VAULT][1] / ref[Mode.DIRECT][1]:.3f})"
        lines.append(line)
    return "\n".join(lines)
