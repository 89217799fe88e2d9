"""Process entry points: `python -m mrharness.minimr master|worker ...`."""

from __future__ import annotations

import argparse
import logging
import signal
import socket
import sys
import threading

from mrharness.minimr.master import DEFAULT_MR_PORT, HEARTBEAT_MS, MISSED_HEARTBEATS, STALL_LIMIT_MS, Master
from mrharness.minimr.worker import Worker
from mrharness.transport.wire import parse_endpoint


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="python -m mrharness.minimr")
    sub = parser.add_subparsers(dest="role", required=True)
    m = sub.add_parser("master")
    m.add_argument("--mr-port", type=int, default=DEFAULT_MR_PORT)
    m.add_argument("--host", default="127.0.0.1")
    m.add_argument("--listen-fd", type=int, help="inherited, already-bound listening socket")
    m.add_argument("--output-dir")
    m.add_argument("--stall-limit-ms", type=int, default=STALL_LIMIT_MS)
    w = sub.add_parser("worker")
    w.add_argument("--master", required=True, help="host:port of the master")
    w.add_argument("--id")
    for p in (m, w):
        p.add_argument("--heartbeat-ms", type=int, default=HEARTBEAT_MS)
        p.add_argument("--missed-heartbeats", type=int, default=MISSED_HEARTBEATS)
        p.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format=f"%(asctime)s {args.role} %(levelname)s %(message)s")

    done = threading.Event()
    if args.role == "master":
        listener = None
        if args.listen_fd is not None:
            listener = socket.socket(fileno=args.listen_fd)
        node = Master(args.host, args.mr_port, listener=listener, heartbeat_ms=args.heartbeat_ms,
                      missed_heartbeats=args.missed_heartbeats, stall_limit_ms=args.stall_limit_ms,
                      output_dir=args.output_dir)
    else:
        node = Worker(parse_endpoint(args.master), args.id, heartbeat_ms=args.heartbeat_ms)

    def on_term(signum, frame):
        done.set()

    signal.signal(signal.SIGTERM, on_term)
    signal.signal(signal.SIGINT, on_term)
    node.start()
    while not done.wait(0.2):
        pass
    node.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
