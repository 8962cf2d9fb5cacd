"""Compare exported audit logs to spot misuse.

Two exports of the same vault should be prefixes of one another.  If they
fork, somebody ran operations on a restored copy.  Within one log, repeated
identical requests (same API, same parameter hash) point at replays; the CA
serves them, so this is where they surface.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import MalformedData
from ..keyvault import AuditLog, LogEntry

REPLAY_SENSITIVE = ("issue_request",)


def load_log(path: str | Path) -> list[LogEntry]:
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                entries.append(LogEntry.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise MalformedData(f"{path}:{lineno}: bad log record: {exc}") from None
    return entries


@dataclass
class LogDiff:
    common: int
    only_a: list[LogEntry]
    only_b: list[LogEntry]
    broken_a: int | None = None
    broken_b: int | None = None
    replays: dict[tuple[str, str], int] = field(default_factory=dict)

    @property
    def forked(self) -> bool:
        return bool(self.only_a) and bool(self.only_b)

    @property
    def clean(self) -> bool:
        return (not self.forked and self.broken_a is None and self.broken_b is None
                and not self.replays)

    def to_dict(self) -> dict:
        return {
            "common": self.common,
            "only_a": [e.to_record() for e in self.only_a],
            "only_b": [e.to_record() for e in self.only_b],
            "forked": self.forked,
            "broken_a": self.broken_a,
            "broken_b": self.broken_b,
            "replays": [{"api_name": api, "params_hash": ph, "count": n}
                        for (api, ph), n in sorted(self.replays.items())],
            "clean": self.clean,
        }


def find_replays(entries: list[LogEntry], apis=REPLAY_SENSITIVE) -> dict[tuple[str, str], int]:
    counts = Counter((e.api_name, e.params_hash.hex()) for e in entries if e.api_name in apis)
    return {k: n for k, n in counts.items() if n > 1}


def diff_logs(a: list[LogEntry], b: list[LogEntry], apis=REPLAY_SENSITIVE) -> LogDiff:
    common = 0
    for x, y in zip(a, b):
        if x.entry_hash != y.entry_hash:
            break
        common += 1
    merged = a + b[common:]
    return LogDiff(common, a[common:], b[common:], AuditLog(a).chain_break(),
                   AuditLog(b).chain_break(), find_replays(merged, apis))


def format_diff(d: LogDiff) -> str:
    lines = [f"common prefix: {d.common} entries"]
    for name, broken in (("A", d.broken_a), ("B", d.broken_b)):
        if broken is not None:
            lines.append(f"log {name}: hash chain broken at entry {broken + 1}")
    if d.forked:
        lines.append(f"FORK: histories diverge after entry {d.common}")
    for name, extra in (("A", d.only_a), ("B", d.only_b)):
        for e in extra:
            lines.append(f"only in {name}: #{e.seq} {e.api_name} {e.params_hash.hex()[:16]}")
    for (api, ph), n in sorted(d.replays.items()):
        lines.append(f"REPLAY: {api} with params {ph[:16]} seen {n} times")
    if d.clean:
        lines.append("no anomalies")
    return "\n".join(lines)
