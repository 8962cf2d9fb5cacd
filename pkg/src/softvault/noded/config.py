"""Flat ``key = value`` node configuration."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..attestation import QuoteType
from ..errors import BadConfig

ROLES = ("ca", "website", "cdn", "pck_cache", "ias")
VAULT_ROLES = ("ca", "website", "cdn")

Address = tuple[str, int]


def parse_address(text: str) -> Address:
    host, sep, port = text.strip().rpartition(":")
    if not sep or not port.isdigit():
        raise BadConfig(f"address must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def format_address(addr: Address) -> str:
    return f"{addr[0]}:{addr[1]}"


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise BadConfig(f"not a boolean: {text!r}")


def _hex_list(text: str) -> list[bytes]:
    try:
        return [bytes.fromhex(p.strip()) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise BadConfig(f"bad hex list: {exc}") from None


@dataclass
class NodeConfig:
    role: str
    state_dir: Path
    listen: Address = ("127.0.0.1", 0)
    pin: str | None = None
    ias: Address | None = None
    ias_public_key: Path | None = None
    pck_cache: Address | None = None
    org_mpk: Path | None = None
    manufacturer_root: Path | None = None
    expected_mrenclave: list[bytes] = field(default_factory=list)
    min_svn: int = 0
    enclave_svn: int = 1
    tcb_version: int = 1
    enclave_image: Path | None = None
    verify_csr_quotes: bool = True
    subject: str = ""
    cert_quote_type: QuoteType = QuoteType.EPID
    quote_type: QuoteType = QuoteType.EPID
    pin_delay: float = 1.0
    timeout: float = 30.0

    def __post_init__(self):
        if self.role not in ROLES:
            raise BadConfig(f"role must be one of {', '.join(ROLES)}, got {self.role!r}")

    @property
    def needs_vault(self) -> bool:
        return self.role in VAULT_ROLES

    def resolve_pin(self) -> str:
        pin = self.pin or os.environ.get("BF_PIN")
        if not pin:
            raise BadConfig("no PIN: set 'pin' in the config or BF_PIN in the environment")
        return pin

    def path(self, name: str) -> Path:
        return self.state_dir / name

    @property
    def control_socket(self) -> Path:
        return self.state_dir / "control.sock"

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None or (f.name == "expected_mrenclave" and not value):
                continue
            if f.name in ("listen", "ias", "pck_cache"):
                text = format_address(value)
            elif f.name == "expected_mrenclave":
                text = ",".join(v.hex() for v in value)
            elif isinstance(value, QuoteType):
                text = value.name.lower()
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as f:
            f.write(self.dumps())


_CONVERT = {
    "listen": parse_address,
    "ias": parse_address,
    "pck_cache": parse_address,
    "state_dir": Path,
    "ias_public_key": Path,
    "org_mpk": Path,
    "manufacturer_root": Path,
    "enclave_image": Path,
    "expected_mrenclave": _hex_list,
    "min_svn": int,
    "enclave_svn": int,
    "tcb_version": int,
    "verify_csr_quotes": _bool,
    "cert_quote_type": QuoteType.parse,
    "quote_type": QuoteType.parse,
    "pin_delay": float,
    "timeout": float,
}


def parse_config(text: str, base_dir: str | os.PathLike | None = None) -> NodeConfig:
    """Parse a config file body.  Relative paths resolve against ``base_dir``."""
    known = {f.name for f in fields(NodeConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise BadConfig(f"line {lineno}: expected key = value")
        if key not in known:
            raise BadConfig(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONVERT.get(key, str)(value)
        except BadConfig:
            raise
        except ValueError as exc:
            raise BadConfig(f"line {lineno}: bad value for {key}: {exc}") from None
    for required in ("role", "state_dir"):
        if required not in values:
            raise BadConfig(f"missing required key {required!r}")
    if base_dir is not None:
        for key, value in values.items():
            if isinstance(value, Path) and not value.is_absolute():
                values[key] = Path(base_dir) / value
    return NodeConfig(**values)


def load_config(path: str | os.PathLike) -> NodeConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise BadConfig(f"cannot read config {p}: {exc}") from None
    return parse_config(text, base_dir=p.parent)
