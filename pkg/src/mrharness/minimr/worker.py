"""minimr worker: runs one task at a time, keeps map output in memory and
serves it to reducers, and heartbeats the master."""

from __future__ import annotations

import logging
import os
import queue
import socket
import threading
import time
import uuid
from typing import Any

from mrharness.jobs import expr as ex
from mrharness.minimr.kv import canonical, partition
from mrharness.minimr.master import HEARTBEAT_MS
from mrharness.transport.wire import FramingError, read_frame, write_frame

log = logging.getLogger(__name__)


class FetchError(Exception):
    pass


def fetch_partition(addr: tuple[str, int], job: str, map_id: str, part: int, timeout: float = 5.0) -> list:
    try:
        with socket.create_connection(tuple(addr), timeout=timeout) as sock:
            write_frame(sock, {"type": "fetch", "job": job, "map": map_id, "partition": part})
            reply = read_frame(sock)
    except (OSError, FramingError) as exc:
        raise FetchError(str(exc)) from None
    if not reply or reply.get("error"):
        raise FetchError(reply.get("error") if reply else "no reply")
    return reply["pairs"]


class Worker:
    def __init__(
        self,
        master: tuple[str, int],
        worker_id: str | None = None,
        *,
        host: str = "127.0.0.1",
        heartbeat_ms: int = HEARTBEAT_MS,
        retry_ms: int | None = None,
    ) -> None:
        self.master = tuple(master)
        self.id = worker_id or f"w-{os.getpid()}-{uuid.uuid4().hex[:6]}"
        self.heartbeat_ms = heartbeat_ms
        self.retry_ms = retry_ms if retry_ms is not None else heartbeat_ms
        self._data = socket.create_server((host, 0))
        self.data_addr = self._data.getsockname()[:2]
        self._store: dict[tuple[str, str], list[list]] = {}
        self._store_lock = threading.Lock()
        self._sock: socket.socket | None = None
        self._send_lock = threading.Lock()
        self._tasks: queue.Queue = queue.Queue()
        self._stop = threading.Event()
        self.registered = threading.Event()
        self.tasks_done: list[str] = []

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> "Worker":
        for target in (self._serve_data, self._control_loop, self._heartbeat_loop, self._task_loop):
            threading.Thread(target=target, daemon=True, name=f"{self.id}-{target.__name__}").start()
        return self

    @property
    def alive(self) -> bool:
        return not self._stop.is_set()

    def kill(self) -> None:
        """Abrupt death: sockets slammed shut, in-memory map output lost."""
        self._stop.set()
        self._tasks.put(None)
        self._close_master()
        try:
            self._data.close()
        except OSError:
            pass
        with self._store_lock:
            self._store.clear()

    stop = kill  # nothing durable to flush; graceful stop is the same teardown

    def _close_master(self) -> None:
        sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()

    def _send(self, obj: dict) -> bool:
        sock = self._sock
        if sock is None or self._stop.is_set():
            return False
        try:
            with self._send_lock:
                if self._stop.is_set():
                    return False
                write_frame(sock, obj)
            return True
        except OSError:
            return False

    # -- threads -------------------------------------------------------------

    def _control_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock = socket.create_connection(self.master, timeout=2.0)
            except OSError:
                # master not up yet (or gone): keep trying
                self._stop.wait(self.retry_ms / 1000.0)
                continue
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            if self._stop.is_set():
                sock.close()
                return
            self._sock = sock
            self._send({"type": "register", "worker": self.id, "data_addr": list(self.data_addr)})
            try:
                while not self._stop.is_set():
                    msg = read_frame(sock)
                    if msg is None:
                        break
                    if msg.get("type") == "registered":
                        self.registered.set()
                    elif msg.get("type") == "task":
                        self._tasks.put(msg)
            except (OSError, FramingError):
                pass
            self.registered.clear()
            if self._sock is sock:
                self._close_master()
            self._stop.wait(self.retry_ms / 1000.0)

    def _heartbeat_loop(self) -> None:
        while not self._stop.wait(self.heartbeat_ms / 1000.0):
            self._send({"type": "heartbeat", "worker": self.id})

    def _serve_data(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._data.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_fetch, args=(sock,), daemon=True).start()

    def _serve_fetch(self, sock: socket.socket) -> None:
        with sock:
            try:
                req = read_frame(sock)
                if not req or self._stop.is_set():
                    return
                with self._store_lock:
                    parts = self._store.get((req["job"], req["map"]))
                if parts is None:
                    write_frame(sock, {"error": f"no output for {req['map']}"})
                else:
                    write_frame(sock, {"pairs": parts[req["partition"]]})
            except (OSError, FramingError, KeyError, IndexError):
                pass

    def _task_loop(self) -> None:
        while True:
            msg = self._tasks.get()
            if msg is None or self._stop.is_set():
                return
            try:
                reply = self._run_map(msg) if msg["kind"] == "map" else self._run_reduce(msg)
            except ex.ExprFault as exc:
                reply = {"type": "task_failed", "error": str(exc)}
            except Exception as exc:  # the body or payload is broken; report, don't die
                log.exception("task %s crashed", msg.get("task"))
                reply = {"type": "task_failed", "error": f"{type(exc).__name__}: {exc}"}
            reply.update(worker=self.id, job=msg["job"], task=msg["task"], attempt=msg["attempt"])
            if self._send(reply):
                self.tasks_done.append(msg["task"])

    # -- task bodies ---------------------------------------------------------

    def _run_map(self, msg: dict) -> dict:
        spec = msg["spec"]
        body = ex.from_json(spec["map"])
        reducers = int(spec["reducers"])
        parts: list[list] = [[] for _ in range(reducers)]
        for record in msg["split"]:
            _, emitted = ex.evaluate(body, record)
            for key, value in emitted:
                parts[partition(key, reducers)].append([key, value])
        with self._store_lock:
            if self._stop.is_set():
                raise ex.ExprFault("worker stopped")
            self._store[(msg["job"], msg["task"])] = parts
        return {"type": "map_done"}

    def _run_reduce(self, msg: dict) -> dict:
        spec = msg["spec"]
        body = ex.from_json(spec["reduce"])
        part = msg["partition"]
        groups: dict[str, tuple[Any, list]] = {}
        for map_id, addr in msg["sources"]:
            try:
                pairs = fetch_partition(addr, msg["job"], map_id, part)
            except FetchError as exc:
                log.info("fetch of %s from %s failed: %s", map_id, addr, exc)
                failed = [m for m, a in msg["sources"] if list(a) == list(addr)]
                return {"type": "fetch_failed", "maps": failed, "source": list(addr)}
            for key, value in pairs:
                groups.setdefault(canonical(key), (key, []))[1].append(value)
        out = []
        for ck in sorted(groups, key=lambda k: k.encode("utf-8")):
            key, values = groups[ck]
            _, emitted = ex.evaluate(body, {"key": key, "values": values})
            out.extend([k, v] for k, v in emitted)
        return {"type": "reduce_done", "pairs": out}


def wait_until(predicate, timeout: float, interval: float = 0.01) -> bool:
    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()
