"""``blindctl``: operator front end for nodes, labs, logs and benchmarks.

Node commands take ``--node DIR`` (a directory holding ``node.conf``).  When
that node's daemon is running they go through its local control socket,
otherwise the node is loaded in-process for the one command.  Every failure
exits with the error's exit code; ``--json`` switches output to JSON.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from ..attestation import QuoteType
from ..errors import (
    EXIT_LOG_INTEGRITY,
    EXIT_OK,
    EXIT_USAGE,
    BadConfig,
    Unavailable,
    VaultError,
)
from ..keyvault import Token
from ..noded import client, setup
from ..noded.config import NodeConfig, load_config, parse_address
from ..soft_tee import PlatformSecret
from . import bench, lab, logdiff


class _Out:
    def __init__(self, as_json: bool):
        self.as_json = as_json

    def emit(self, result: dict, text: str | None = None) -> None:
        if self.as_json:
            print(json.dumps(result, sort_keys=True))
        elif text is not None:
            print(text)
        else:
            for k, v in result.items():
                print(f"{k}: {v if not isinstance(v, (list, dict)) else json.dumps(v)}")


def _pin(args) -> str:
    pin = getattr(args, "pin", None) or os.environ.get("BF_PIN")
    if not pin:
        raise BadConfig("no PIN: pass --pin or set BF_PIN")
    return pin


def node_config(node_dir: str | Path) -> NodeConfig:
    return load_config(Path(node_dir) / setup.CONFIG_FILE)


def node_call(node_dir: str | Path, command: str, params: dict) -> dict:
    """Run a control command on a node, via its daemon if one is listening."""
    config = node_config(node_dir)
    sock = config.control_socket
    if sock.exists():
        try:
            return client.control(sock, command, params)
        except Unavailable as exc:
            if exc.remote:
                raise
            # stale socket from a dead daemon
    from ..noded.node import Station

    station = Station(config)
    try:
        return station.control(command, params)
    finally:
        station.close()


# --- command handlers --------------------------------------------------------

def cmd_lab(args, out: _Out) -> int:
    if args.action == "init":
        info = lab.create_lab(args.dir, _pin(args), QuoteType.parse(args.quote_type),
                              pin_delay=args.pin_delay)
        text = "\n".join(f"{n:<8} {v['role']:<10} {v['address']:<22} {v['dir']}"
                         for n, v in info["nodes"].items())
        out.emit(info, text)
    elif args.action == "up":
        pids = lab.start_lab(args.dir, args.nodes.split(",") if args.nodes else None)
        out.emit({"running": pids})
    elif args.action == "down":
        out.emit({"stopped": lab.stop_lab(args.dir)})
    else:
        info = lab.load_lab(args.dir)
        pids = lab._read_pids(Path(args.dir))
        for name, node in info["nodes"].items():
            node["pid"] = pids.get(name)
            node["running"] = bool(pids.get(name)) and lab._alive(pids[name])
        out.emit(info, "\n".join(f"{n:<8} {v['role']:<10} {v['address']:<22} "
                                 f"{'up' if v['running'] else 'down'}"
                                 for n, v in info["nodes"].items()))
    return EXIT_OK


def cmd_init(args, out: _Out) -> int:
    d = Path(args.dir).resolve()
    cfg = NodeConfig(role=args.role, state_dir=d, listen=parse_address(args.listen))
    if args.role == "ias":
        service = setup.init_ias_node(d)
        result = {"role": "ias", "dir": str(d), "public_key": service.public_key.hex()}
    elif args.role == "pck_cache":
        setup.init_pck_cache_node(d)
        result = {"role": "pck_cache", "dir": str(d)}
    else:
        from ..attestation import Manufacturer

        if not args.manufacturer:
            raise BadConfig("vault nodes need --manufacturer DIR (root.cert and root.key)")
        try:
            manufacturer = Manufacturer.load(args.manufacturer)
        except OSError as exc:
            raise BadConfig(f"cannot load manufacturer from {args.manufacturer}: {exc}") from None
        ias = setup.load_ias_state(args.ias_dir) if args.ias_dir else None
        enclave, qe, token = setup.init_vault_node(d, _pin(args), manufacturer, ias,
                                                   enclave_svn=args.svn)
        token.close()
        lab._write_platform_public(d, qe)
        cfg.enclave_svn = args.svn
        result = {"role": args.role, "dir": str(d), "platform_id": enclave.platform_id.hex(),
                  "mrenclave": enclave.measurement.mrenclave.hex()}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise BadConfig(f"--set expects key=value, got {item!r}")
        from ..noded.config import parse_config

        merged = parse_config(cfg.dumps() + f"{key.strip()} = {value.strip()}\n", d)
        cfg = merged
    cfg.save(d / setup.CONFIG_FILE)
    out.emit(result)
    return EXIT_OK


def cmd_org(args, out: _Out) -> int:
    if args.action == "init":
        mpk = lab.init_org(args.admin, _pin(args))
        out.emit({"mpk": mpk.hex(), "file": str(Path(args.admin) / lab.ORG_MPK)})
    else:
        pids = lab.sanction(args.admin, _pin(args), args.cache, args.nodes)
        out.emit({"sanctioned": [p.hex() for p in pids]})
    return EXIT_OK


def cmd_node(command: str, params_of):
    def handler(args, out: _Out) -> int:
        result = node_call(args.node, command, params_of(args))
        if getattr(args, "out", None):
            key = "cert" if "cert" in result else "csr"
            Path(args.out).write_text(result[key])
        out.emit(result)
        return EXIT_OK
    return handler


def _message(args) -> str:
    if args.file:
        return Path(args.file).read_bytes().hex()
    if args.message_hex:
        return args.message_hex
    return (args.message or "").encode().hex()


def cmd_log_verify(args, out: _Out) -> int:
    """Check the vault at rest: journal chain against the counter file and state."""
    if args.node:
        config = node_config(args.node)
        path = config.path(setup.VAULT_FILE)
        enclave = setup.node_enclave(PlatformSecret.load(config.path(setup.PLATFORM_FILE)),
                                     config.enclave_image, config.enclave_svn, config.tcb_version)
    else:
        path = Path(args.vault)
        platform = PlatformSecret.load(path.parent / setup.PLATFORM_FILE)
        enclave = setup.node_enclave(platform)
    try:
        report, log = Token.inspect(path, enclave)
    except VaultError as exc:
        out.emit({"status": exc.code, "detail": exc.detail}, f"{exc.code}: {exc.detail}")
        return exc.exit_code
    out.emit({"status": report.status.value, "detail": report.detail, "entries": len(log)},
             f"{report.status.value} ({len(log)} entries){': ' + report.detail if report.detail else ''}")
    return EXIT_OK if report.ok else EXIT_LOG_INTEGRITY


def cmd_log_diff(args, out: _Out) -> int:
    d = logdiff.diff_logs(logdiff.load_log(args.a), logdiff.load_log(args.b))
    out.emit(d.to_dict(), logdiff.format_diff(d))
    return EXIT_OK if d.clean else EXIT_LOG_INTEGRITY


def cmd_bench(args, out: _Out) -> int:
    ops = [bench.Operation.parse(o) for o in args.ops.split(",")]
    t0 = time.monotonic()

    def progress(op, i, total):
        if args.progress and i % 100 == 0:
            print(f"  {op.value}: {i}/{total}", file=sys.stderr)

    reports = bench.run_bench(ops, args.runs, args.warmup, progress=progress)
    elapsed = time.monotonic() - t0
    ratios = {op.value: bench.overhead_ratio(reports, op) for op in ops}
    if args.jsonl:
        with open(args.jsonl, "w") as f:
            for r in reports:
                f.write(json.dumps(r.record()) + "\n")
    result = {"reports": [r.record() for r in reports], "ratios": ratios,
              "elapsed_s": round(elapsed, 2), "warmup": args.warmup}
    if out.as_json:
        out.emit(result)
    else:
        print(bench.format_table(reports))
        print(f"elapsed {elapsed:.1f} s")
        for r in reports:
            print(json.dumps(r.record()))
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blindctl", description=__doc__.split("\n")[0].strip("`: "))
    p.add_argument("--json", action="store_true", help="machine-readable JSON output")
    sub = p.add_subparsers(dest="command", required=True)

    def node_cmd(name, help_text, command, params_of, extra=()):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--node", required=True, help="node directory (holds node.conf)")
        for args, kw in extra:
            sp.add_argument(*args, **kw)
        sp.set_defaults(func=cmd_node(command, params_of))
        return sp

    sp = sub.add_parser("lab", help="create and run a single-host lab deployment")
    sp.add_argument("action", choices=["init", "up", "down", "status"])
    sp.add_argument("--dir", required=True)
    sp.add_argument("--pin")
    sp.add_argument("--quote-type", default="epid", choices=["epid", "ecdsa"])
    sp.add_argument("--pin-delay", type=float, default=1.0)
    sp.add_argument("--nodes", help="comma-separated subset for 'up'")
    sp.set_defaults(func=cmd_lab)

    sp = sub.add_parser("init", help="initialise one node directory")
    sp.add_argument("--dir", required=True)
    sp.add_argument("--role", required=True, choices=["ca", "website", "cdn", "pck_cache", "ias"])
    sp.add_argument("--pin")
    sp.add_argument("--listen", default="127.0.0.1:0")
    sp.add_argument("--manufacturer", help="directory with root.cert and root.key")
    sp.add_argument("--ias-dir", help="verification service directory, for EPID enrolment")
    sp.add_argument("--svn", type=int, default=1)
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="extra config entries")
    sp.set_defaults(func=cmd_init)

    sp = sub.add_parser("org", help="organisation key and PCK cache administration")
    org = sp.add_subparsers(dest="action", required=True)
    op = org.add_parser("init", help="create the organisation master key pair")
    op.add_argument("--admin", required=True, help="admin vault directory")
    op.add_argument("--pin")
    op.set_defaults(func=cmd_org)
    op = org.add_parser("sanction", help="sign PCK entries of nodes into the cache")
    op.add_argument("--admin", required=True, help="admin vault directory")
    op.add_argument("--cache", required=True, help="PCK cache directory")
    op.add_argument("--pin")
    op.add_argument("nodes", nargs="+", help="node directories to sanction")
    op.set_defaults(func=cmd_org)

    node_cmd("status", "show node identity and vault state", "status", lambda a: {})
    node_cmd("objects", "list vault objects", "objects", lambda a: {})
    node_cmd("keygen", "generate a key pair inside the vault", "keygen",
             lambda a: {"algorithm": a.alg, "label": a.label, "quote_type": a.quote_type,
                        "attest": not a.no_quote},
             [(("--alg",), dict(default="rsa2048", help="rsa2048 | ecdsa_p256 | ecdh_p256")),
              (("--label",), dict(default="")),
              (("--quote-type",), dict(choices=["epid", "ecdsa"])),
              (("--no-quote",), dict(action="store_true"))])
    node_cmd("sign", "sign a message with a vault key", "sign",
             lambda a: {"handle": a.handle, "message": _message(a)},
             [(("--handle",), dict(type=int, required=True)),
              (("--message",), dict(help="UTF-8 message")),
              (("--message-hex",), dict()),
              (("--file",), dict(help="sign the contents of a file"))])
    node_cmd("csr", "generate a key and a quoted CSR", "csr",
             lambda a: {"subject": a.subject, "algorithm": a.alg, "quote_type": a.quote_type},
             [(("--subject",), dict(required=True)), (("--alg",), dict(default="rsa2048")),
              (("--quote-type",), dict(choices=["epid", "ecdsa"])), (("--out",), dict())])
    node_cmd("self-sign", "create a self-signed certificate with an embedded quote", "self-sign",
             lambda a: {"subject": a.subject, "algorithm": a.alg,
                        **({"quote_type": a.quote_type} if a.quote_type else {})},
             [(("--subject",), dict(required=True)), (("--alg",), dict(default="rsa2048")),
              (("--quote-type",), dict(choices=["epid", "ecdsa"])), (("--out",), dict())])
    node_cmd("issue", "obtain a certificate from an attested CA", "issue",
             lambda a: {"ca": a.ca, "subject": a.subject, "algorithm": a.alg,
                        "quote_type": a.quote_type, "min_svn": a.min_svn,
                        "expected_ca_mrenclave": a.expected_ca_mrenclave},
             [(("--ca",), dict(required=True, help="CA address host:port")),
              (("--subject",), dict(required=True)), (("--alg",), dict(default="rsa2048")),
              (("--quote-type",), dict(choices=["epid", "ecdsa"])),
              (("--min-svn",), dict(type=int, default=0)),
              (("--expected-ca-mrenclave",), dict(action="append", metavar="HEX")),
              (("--out",), dict(help="write the certificate here"))])
    node_cmd("transfer", "send a certified key to a CDN edge", "transfer",
             lambda a: {"peer": a.peer, "handle": a.handle, "subject": a.subject},
             [(("--peer",), dict(required=True, help="CDN address host:port")),
              (("--handle",), dict(type=int)), (("--subject",), dict())])
    node_cmd("provision", "provision keys with a sibling platform", "provision",
             lambda a: {"peer": a.peer, "node_type": a.role,
                        "handles": [int(h) for h in a.handles.split(",")] if a.handles else None},
             [(("--peer",), dict(required=True)),
              (("--role",), dict(default="sender", choices=["sender", "receiver"])),
              (("--handles",), dict(help="comma-separated handles (default: all key pairs)"))])
    node_cmd("backup", "copy every key pair to a sanctioned backup platform", "provision",
             lambda a: {"peer": a.peer, "node_type": "sender"},
             [(("--peer",), dict(required=True))])
    node_cmd("export-log", "write the audit log as JSON lines", "export-log",
             lambda a: {"path": str(Path(a.path).resolve())},
             [(("--path",), dict(required=True))])

    sp = sub.add_parser("log-verify", help="check a vault's audit log against its counter")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--node")
    g.add_argument("--vault", help="path to vault.sealed (platform.secret alongside)")
    sp.set_defaults(func=cmd_log_verify)

    sp = sub.add_parser("log-diff", help="compare two exported logs (forks, replays)")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.set_defaults(func=cmd_log_diff)

    sp = sub.add_parser("bench", help="time vault operations against the direct baseline")
    sp.add_argument("--runs", type=int, default=1000)
    sp.add_argument("--warmup", type=int, default=bench.WARMUP)
    sp.add_argument("--ops", default="keygen,sign",
                    help="comma-separated: keygen, sign, issuance")
    sp.add_argument("--jsonl", help="also write one JSON record per report to this file")
    sp.add_argument("--progress", action="store_true")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = _Out(args.json)
    try:
        return args.func(args, out)
    except VaultError as exc:
        step = getattr(exc, "step", "")
        if args.json:
            print(json.dumps({"error": exc.code, "step": step, "detail": exc.detail,
                              "remote": exc.remote}, sort_keys=True))
        else:
            where = f" [{step}]" if step else ""
            print(f"blindctl: {exc.code}{where}: {exc.detail}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"blindctl: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
