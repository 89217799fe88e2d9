"""Client API for the minimr master, plus an in-process cluster for tests."""

from __future__ import annotations

import socket
import time
from dataclasses import dataclass
from typing import Any

from mrharness.minimr.jobspec import JobSpec
from mrharness.minimr.master import Master
from mrharness.minimr.worker import Worker
from mrharness.transport.wire import FramingError, read_frame, write_frame


class MasterUnreachable(ConnectionError):
    pass


@dataclass(frozen=True)
class JobResult:
    output: Any  # None is NULL: the job faulted or could not finish
    error: str | None = None
    output_file: str | None = None
    elapsed_ms: int | None = None

    @property
    def is_null(self) -> bool:
        return self.output is None


def _request(addr: tuple[str, int], obj: dict, timeout: float | None) -> dict:
    try:
        sock = socket.create_connection(tuple(addr), timeout=5.0 if timeout is None else min(timeout, 5.0))
    except OSError as exc:
        raise MasterUnreachable(f"master at {addr[0]}:{addr[1]} unreachable: {exc}") from None
    with sock:
        sock.settimeout(timeout)
        try:
            write_frame(sock, obj)
            reply = read_frame(sock)
        except socket.timeout:
            raise TimeoutError("no reply from master before timeout") from None
        except (OSError, FramingError) as exc:
            raise MasterUnreachable(f"lost connection to master: {exc}") from None
    if reply is None:
        raise MasterUnreachable("master closed the connection")
    return reply


def submit_job(addr: tuple[str, int], spec: JobSpec, timeout: float | None = None) -> JobResult:
    """Block until the job finishes. Raises TimeoutError or MasterUnreachable."""
    reply = _request(addr, {"type": "submit", "spec": spec.to_json()}, timeout)
    return JobResult(reply.get("output"), reply.get("error"), reply.get("output_file"), reply.get("elapsed_ms"))


def roster(addr: tuple[str, int], timeout: float = 5.0) -> list[str]:
    return _request(addr, {"type": "roster"}, timeout)["workers"]


class LocalCluster:
    """Master plus N workers as threads of this process."""

    def __init__(self, workers: int = 3, *, heartbeat_ms: int = 50, missed_heartbeats: int = 3,
                 stall_limit_ms: int = 30_000, output_dir=None) -> None:
        self.master = Master(port=0, heartbeat_ms=heartbeat_ms, missed_heartbeats=missed_heartbeats,
                             stall_limit_ms=stall_limit_ms, output_dir=output_dir)
        self.heartbeat_ms = heartbeat_ms
        self.workers: list[Worker] = []
        self._n = workers

    @property
    def address(self) -> tuple[str, int]:
        return self.master.address

    def add_worker(self) -> Worker:
        w = Worker(self.address, f"w{len(self.workers)}", heartbeat_ms=self.heartbeat_ms).start()
        self.workers.append(w)
        return w

    def __enter__(self) -> "LocalCluster":
        self.master.start()
        for _ in range(self._n):
            self.add_worker()
        self.wait_registered()
        return self

    def wait_registered(self, timeout: float = 5.0) -> None:
        end = time.monotonic() + timeout
        for w in self.workers:
            if w.alive and not w.registered.wait(max(0.0, end - time.monotonic())):
                raise TimeoutError(f"{w.id} did not register")

    def submit(self, spec: JobSpec, timeout: float | None = 60.0) -> JobResult:
        return submit_job(self.address, spec, timeout)

    def __exit__(self, *exc) -> None:
        for w in self.workers:
            w.kill()
        self.master.stop()
