"""``blindnoded --config node.conf``: run one node until SIGTERM/SIGINT."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading

from ..errors import EXIT_OK, EXIT_UNAVAILABLE, VaultError
from .config import format_address, load_config
from .node import Station
from .server import NodeServer


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="blindnoded", description="Run a softvault node daemon.")
    p.add_argument("--config", required=True, help="path to the node's key = value config")
    p.add_argument("--recover", action="store_true",
                   help="install a sealed state left pending by a crash instead of refusing to start")
    p.add_argument("--verbose", "-v", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = load_config(args.config)
        station = Station(config, recover=args.recover)
        server = NodeServer(station)
    except VaultError as exc:
        print(f"blindnoded: {exc.code}: {exc.detail}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"blindnoded: cannot start: {exc}", file=sys.stderr)
        return EXIT_UNAVAILABLE

    stop = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())
    addr = server.start()
    print(f"READY {config.role} {format_address(addr)}", flush=True)
    stop.wait()
    server.shutdown()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
