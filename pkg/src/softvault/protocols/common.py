"""Helpers shared by the protocol state machines."""

from __future__ import annotations

from ..encoding import hash_fields
from ..errors import VaultError
from .channel import Session


def abort(session: Session, token, pin: str, exc: VaultError, protocol: str) -> None:
    """Report ``exc`` to the peer and record the abort in the local audit log."""
    session.report(exc)
    step = getattr(exc, "step", "") or session.name
    try:
        token.record_event(f"{protocol}_abort", {"code": exc.code, "step": step,
                                                 "session": session.session_id,
                                                 "remote": exc.remote}, pin)
    except VaultError:
        pass


def discard(token, pin: str, *handles: int | None) -> None:
    """Destroy leftover volatile objects after an abort; missing handles are fine."""
    live = {o.handle for o in token.objects() if o.volatile}
    for h in handles:
        if h is not None and h in live:
            try:
                token.destroy_object(h, pin)
            except VaultError:
                pass


def transcript_hash(label: str, *parts: bytes) -> bytes:
    return hash_fields(label, parts)
