"""A complete single-host deployment in one directory.

``create_lab`` lays out a verification service, an organisation PCK cache, a
CA, a website, a CDN edge, a second sanctioned platform for backups and one
unsanctioned ("rogue") platform.  ``start_lab`` runs each as its own daemon
process.  The simulated manufacturer's root key lives only in memory while
the lab is created; just its certificate is written out.
"""

from __future__ import annotations

import json
import os
import signal
import socket
import subprocess
import sys
import time
from pathlib import Path

from ..attestation import (
    Manufacturer,
    PckCacheEntry,
    QuoteType,
    generate_org_keys,
    sign_pck_cache,
)
from ..certkit import BlindCert
from ..errors import BadConfig, Unavailable
from ..keyvault import Token
from ..noded import setup
from ..noded.config import NodeConfig, format_address, load_config
from ..soft_tee import PlatformSecret

LAB_FILE = "lab.json"
PIDS_FILE = "lab.pids"
ORG_MPK = "org.mpk"
PCK_CERT = "pck.cert"
PLATFORM_ID = "platform.id"

# name -> role; order is also start order.
LAB_NODES = {
    "ias": "ias",
    "pck": "pck_cache",
    "ca": "ca",
    "website": "website",
    "cdn": "cdn",
    "backup": "website",
    "rogue": "website",
}
SANCTIONED = ("website", "cdn", "backup")


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def _write_platform_public(node_dir: Path, qe) -> None:
    qe.pck_cert.save(node_dir / PCK_CERT)
    (node_dir / PLATFORM_ID).write_text(qe.platform.platform_id.hex() + "\n")


def open_admin(admin_dir: str | Path, pin: str) -> Token:
    d = Path(admin_dir)
    enclave = setup.node_enclave(PlatformSecret.load(d / setup.PLATFORM_FILE))
    return Token.open(d / setup.VAULT_FILE, pin, enclave, pin_delay=0)


def init_org(admin_dir: str | Path, pin: str) -> bytes:
    """Create the organisation master key pair in the admin vault; returns mpk."""
    d = Path(admin_dir)
    token = open_admin(d, pin)
    try:
        keys = generate_org_keys(token, pin)
    finally:
        token.close()
    (d / ORG_MPK).write_text(keys.mpk.hex() + "\n")
    return keys.mpk


def sanction(admin_dir: str | Path, pin: str, cache_dir: str | Path,
             node_dirs: list[str | Path]) -> list[bytes]:
    """Sign the PCK entries of ``node_dirs`` with the org key and add them to the cache."""
    d = Path(admin_dir)
    mpk = bytes.fromhex((d / ORG_MPK).read_text().strip())
    drafts = []
    for nd in map(Path, node_dirs):
        try:
            pid = bytes.fromhex((nd / PLATFORM_ID).read_text().strip())
            drafts.append(PckCacheEntry(pid, BlindCert.load(nd / PCK_CERT), b""))
        except (OSError, ValueError) as exc:
            raise BadConfig(f"{nd} has no platform id / PCK certificate: {exc}") from None
    token = open_admin(d, pin)
    try:
        entries = sign_pck_cache(drafts, token, pin, mpk)
    finally:
        token.close()
    setup.init_pck_cache_node(cache_dir, entries)
    return [e.platform_id for e in entries]


def create_lab(root: str | Path, pin: str, quote_type: QuoteType = QuoteType.EPID,
               host: str = "127.0.0.1", pin_delay: float = 1.0) -> dict:
    root = Path(root).resolve()
    if (root / LAB_FILE).exists():
        raise BadConfig(f"{root} already holds a lab")
    root.mkdir(parents=True, exist_ok=True)
    manufacturer = Manufacturer.create()
    (root / "manufacturer").mkdir(exist_ok=True)
    manufacturer.root_cert.save(root / "manufacturer" / "root.cert")

    ports = {name: free_port(host) for name in LAB_NODES}
    addr = {name: (host, port) for name, port in ports.items()}
    ias = setup.init_ias_node(root / "ias")
    setup.init_pck_cache_node(root / "pck")

    _, qe, admin = setup.init_vault_node(root / "org", pin, manufacturer, ias, pin_delay=0)
    admin.close()
    init_org(root / "org", pin)

    for name, role in LAB_NODES.items():
        d = root / name
        if role not in ("ias", "pck_cache"):
            _, qe, token = setup.init_vault_node(d, pin, manufacturer, ias, pin_delay=pin_delay)
            token.close()
            _write_platform_public(d, qe)
        cfg = NodeConfig(role=role, state_dir=d, listen=addr[name])
        if role not in ("ias", "pck_cache"):
            cfg.pin = pin
            cfg.pin_delay = pin_delay
            cfg.ias = addr["ias"]
            cfg.ias_public_key = root / "ias" / setup.IAS_PUBLIC
            cfg.manufacturer_root = root / "manufacturer" / "root.cert"
            cfg.pck_cache = addr["pck"]
            cfg.org_mpk = root / "org" / ORG_MPK
            cfg.quote_type = quote_type
            cfg.cert_quote_type = quote_type
            cfg.subject = {"ca": "Softvault Lab CA", "cdn": "edge.cdn.lab"}.get(name, "")
        cfg.save(d / setup.CONFIG_FILE)

    sanction(root / "org", pin, root / "pck", [root / n for n in SANCTIONED])
    info = {"root": str(root), "nodes": {n: {"role": r, "dir": str(root / n),
                                             "address": format_address(addr[n])}
                                         for n, r in LAB_NODES.items()},
            "sanctioned": list(SANCTIONED), "quote_type": quote_type.name.lower()}
    (root / LAB_FILE).write_text(json.dumps(info, indent=2) + "\n")
    return info


def load_lab(root: str | Path) -> dict:
    p = Path(root) / LAB_FILE
    if not p.exists():
        raise BadConfig(f"no lab at {root}")
    return json.loads(p.read_text())


def start_node(config_path: str | Path, timeout: float = 60.0, env: dict | None = None,
               extra_args: list[str] = ()) -> tuple[subprocess.Popen, str]:
    """Spawn ``blindnoded`` and wait for its READY line; returns (process, address).

    The daemon's stderr goes to ``node.log`` next to its config.
    """
    log_path = Path(config_path).parent / "node.log"
    with open(log_path, "a") as log:
        proc = subprocess.Popen(
            [sys.executable, "-m", "softvault.noded", "--config", str(config_path),
             *extra_args],
            stdout=subprocess.PIPE, stderr=log, text=True, env=env, start_new_session=True)
    deadline = time.monotonic() + timeout
    line = ""
    while time.monotonic() < deadline:
        line = proc.stdout.readline()
        if line.startswith("READY"):
            return proc, line.split()[2]
        if proc.poll() is not None:
            break
    proc.kill()
    proc.wait()
    err = log_path.read_text()[-2000:]
    raise Unavailable(f"node {config_path} did not start: {err.strip() or line.strip()}")


def start_lab(root: str | Path, names: list[str] | None = None) -> dict[str, int]:
    root = Path(root)
    lab = load_lab(root)
    pids = _read_pids(root)
    for name in names or list(lab["nodes"]):
        if name in pids and _alive(pids[name]):
            continue
        proc, _ = start_node(root / name / setup.CONFIG_FILE)
        # The daemon keeps running after we exit; drop our pipe ends.
        proc.stdout.close()
        pids[name] = proc.pid
        (root / PIDS_FILE).write_text(json.dumps(pids))
    return pids


def stop_lab(root: str | Path, timeout: float = 10.0) -> list[str]:
    root = Path(root)
    pids = _read_pids(root)
    stopped = []
    for name, pid in pids.items():
        if _alive(pid):
            os.kill(pid, signal.SIGTERM)
            deadline = time.monotonic() + timeout
            while _alive(pid) and time.monotonic() < deadline:
                time.sleep(0.05)
            if _alive(pid):
                os.kill(pid, signal.SIGKILL)
            stopped.append(name)
    (root / PIDS_FILE).unlink(missing_ok=True)
    return stopped


def _read_pids(root: Path) -> dict[str, int]:
    p = root / PIDS_FILE
    return json.loads(p.read_text()) if p.exists() else {}


def _alive(pid: int) -> bool:
    try:
        done, _ = os.waitpid(pid, os.WNOHANG)
        if done:
            return False
    except ChildProcessError:
        pass
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    return True


def lab_config(root: str | Path, name: str):
    return load_config(Path(root) / name / setup.CONFIG_FILE)
