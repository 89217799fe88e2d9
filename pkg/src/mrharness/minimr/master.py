"""minimr master: worker roster, heartbeat failure detection, FIFO task
scheduling, re-execution of lost work, and final output assembly.

All state changes happen on one scheduling thread that drains a serialized
inbound queue; socket reader threads only enqueue.
"""

from __future__ import annotations

import itertools
import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from mrharness.jobs import expr as ex
from mrharness.minimr.jobspec import JobSpec, finalize, job_result
from mrharness.minimr.kv import format_output
from mrharness.transport.wire import FramingError, read_frame, write_frame

log = logging.getLogger(__name__)

DEFAULT_MR_PORT = 7800
HEARTBEAT_MS = 500
MISSED_HEARTBEATS = 3
STALL_LIMIT_MS = 30_000

IDLE, IN_PROGRESS, COMPLETED = "idle", "in-progress", "completed"


@dataclass
class TaskState:
    id: str
    kind: str  # "map" | "reduce"
    index: int
    status: str = IDLE
    worker: str | None = None
    attempt: int = 0
    # map: worker holding the intermediate output; reduce: reduced pairs
    location: tuple[str, tuple[str, int]] | None = None
    pairs: list | None = None


@dataclass
class _Worker:
    id: str
    conn: "_Conn"
    data_addr: tuple[str, int]
    last_seen: float
    task: str | None = None


@dataclass
class _Job:
    id: str
    spec: JobSpec
    client: "_Conn"
    maps: list[TaskState]
    reduces: list[TaskState]
    started: float
    spec_json: dict = field(default_factory=dict)

    def tasks(self) -> list[TaskState]:
        return self.maps + self.reduces

    def task(self, task_id: str) -> TaskState:
        kind, idx = task_id[0], int(task_id[1:])
        return (self.maps if kind == "m" else self.reduces)[idx]


class _Conn:
    _ids = itertools.count()

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self.id = next(self._ids)
        self.lock = threading.Lock()
        self.closed = False

    def send(self, obj: Any) -> bool:
        if self.closed:
            return False
        try:
            with self.lock:
                write_frame(self.sock, obj)
            return True
        except OSError:
            self.close()
            return False

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class Master:
    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = DEFAULT_MR_PORT,
        *,
        listener: socket.socket | None = None,
        heartbeat_ms: int = HEARTBEAT_MS,
        missed_heartbeats: int = MISSED_HEARTBEATS,
        stall_limit_ms: int = STALL_LIMIT_MS,
        output_dir: str | Path | None = None,
    ) -> None:
        self._listener = listener if listener is not None else socket.create_server((host, port))
        self.address: tuple[str, int] = self._listener.getsockname()[:2]
        self.heartbeat_ms = heartbeat_ms
        self.missed_heartbeats = missed_heartbeats
        self.stall_limit_ms = stall_limit_ms
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.workers: dict[str, _Worker] = {}
        self.dead: list[str] = []
        self._inbox: queue.Queue = queue.Queue()
        self._job: _Job | None = None
        self._job_seq = itertools.count(1)
        self._no_workers_since: float | None = None
        self._stopping = threading.Event()
        self._threads: list[threading.Thread] = []
        self._conns: set[_Conn] = set()
        self._conns_lock = threading.Lock()
        self.events: list[tuple[float, str, str]] = []  # (time, event, subject) for tests

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> "Master":
        for target in (self._accept_loop, self._schedule_loop):
            t = threading.Thread(target=target, daemon=True, name=f"minimr-master-{target.__name__}")
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        """Graceful shutdown: abort any in-flight job and close connections."""
        if self._stopping.is_set():
            return
        self._inbox.put(("stop", None, None))
        for t in self._threads:
            if t.name.endswith("_schedule_loop"):
                t.join(timeout=2.0)
        self._shutdown_sockets()

    def kill(self) -> None:
        """Abrupt in-process death: no replies, no cleanup messages."""
        self._stopping.set()
        self._shutdown_sockets()

    def _shutdown_sockets(self) -> None:
        self._stopping.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conns_lock:
            conns = list(self._conns)
        for c in conns:
            c.close()

    @property
    def running(self) -> bool:
        return not self._stopping.is_set()

    def live_workers(self) -> list[str]:
        return list(self.workers)

    # -- network -------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Conn(sock)
            with self._conns_lock:
                self._conns.add(conn)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True).start()

    def _read_loop(self, conn: _Conn) -> None:
        try:
            while True:
                obj = read_frame(conn.sock)
                if obj is None:
                    break
                self._inbox.put(("msg", conn, obj))
        except (OSError, FramingError):
            pass
        finally:
            conn.close()
            with self._conns_lock:
                self._conns.discard(conn)
            self._inbox.put(("closed", conn, None))

    # -- scheduling loop -----------------------------------------------------

    def _schedule_loop(self) -> None:
        tick = max(0.001, self.heartbeat_ms / 4000.0)
        while True:
            try:
                kind, conn, obj = self._inbox.get(timeout=tick)
            except queue.Empty:
                kind = None
            if self._stopping.is_set() and kind != "stop":
                return
            if kind == "stop":
                self._fail_job("master shutting down")
                self._stopping.set()
                return
            if kind == "msg":
                try:
                    self._handle(conn, obj)
                except (KeyError, TypeError, ValueError, IndexError) as exc:
                    log.warning("bad message %r: %s", obj, exc)
            elif kind == "closed":
                self._on_closed(conn)
            self._check_heartbeats()
            self._check_stall()
            self._assign()

    def _now(self) -> float:
        return time.monotonic()

    def _handle(self, conn: _Conn, msg: dict) -> None:
        kind = msg["type"]
        if kind == "register":
            wid = msg["worker"]
            old = self.workers.get(wid)
            if old is not None and old.conn is not conn:
                self._declare_dead(wid, "re-registered")
            self.workers[wid] = _Worker(wid, conn, tuple(msg["data_addr"]), self._now())
            self.events.append((self._now(), "register", wid))
            conn.send({"type": "registered", "worker": wid})
            return
        if kind == "submit":
            self._submit(conn, msg)
            return
        if kind == "roster":
            conn.send({"type": "roster", "workers": sorted(self.workers), "dead": list(self.dead)})
            return

        wid = msg.get("worker")
        w = self.workers.get(wid)
        if w is None or w.conn is not conn:
            return  # stale worker (declared dead); ignore everything it says
        w.last_seen = self._now()
        if kind == "heartbeat":
            return
        job = self._job
        if job is None or msg.get("job") != job.id:
            w.task = None
            return
        task = job.task(msg["task"])
        if task.worker != wid or task.attempt != msg.get("attempt") or task.status != IN_PROGRESS:
            return
        w.task = None
        if kind == "map_done":
            task.status = COMPLETED
            task.location = (wid, w.data_addr)
        elif kind == "reduce_done":
            task.status = COMPLETED
            task.pairs = [tuple(p) for p in msg["pairs"]]
            if all(t.status == COMPLETED for t in job.reduces):
                self._complete_job()
        elif kind == "fetch_failed":
            task.status, task.worker = IDLE, None
            for map_id in msg["maps"]:
                m = job.task(map_id)
                if m.status == COMPLETED and m.location is not None and list(m.location[1]) == list(msg["source"]):
                    m.status, m.worker, m.location = IDLE, None, None
        elif kind == "task_failed":
            self._fail_job(f"{task.id} failed: {msg.get('error')}")

    def _on_closed(self, conn: _Conn) -> None:
        # Connection loss is not a death signal; only missed heartbeats are.
        job = self._job
        if job is not None and job.client is conn:
            log.info("client of %s went away; job continues", job.id)

    def _submit(self, conn: _Conn, msg: dict) -> None:
        if self._job is not None:
            conn.send({"type": "result", "output": None, "error": "another job is running"})
            return
        try:
            spec = JobSpec.from_json(msg["spec"])
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            conn.send({"type": "result", "output": None, "error": f"bad job spec: {exc}"})
            return
        job_id = f"job-{next(self._job_seq)}"
        maps = [TaskState(f"m{i}", "map", i) for i in range(len(spec.splits))]
        reduces = [TaskState(f"r{i}", "reduce", i) for i in range(spec.num_reducers)]
        self._job = _Job(job_id, spec, conn, maps, reduces, self._now(), msg["spec"])
        self.events.append((self._now(), "submit", job_id))
        if not maps:
            for r in reduces:
                r.status, r.pairs = COMPLETED, []
            self._complete_job()

    def _assign(self) -> None:
        job = self._job
        if job is None:
            return
        idle_workers = [w for w in self.workers.values() if w.task is None]
        if not idle_workers:
            return
        todo = [t for t in job.maps if t.status == IDLE]
        if not todo and all(t.status == COMPLETED for t in job.maps):
            todo = [t for t in job.reduces if t.status == IDLE]
        for w, task in zip(idle_workers, todo):
            task.status = IN_PROGRESS
            task.worker = w.id
            task.attempt += 1
            w.task = task.id
            msg: dict[str, Any] = {
                "type": "task",
                "job": job.id,
                "task": task.id,
                "kind": task.kind,
                "attempt": task.attempt,
                "spec": {k: v for k, v in job.spec_json.items() if k != "splits"},
            }
            if task.kind == "map":
                msg["split"] = [dict(r) for r in job.spec.splits[task.index]]
            else:
                msg["partition"] = task.index
                msg["sources"] = [[m.id, list(m.location[1])] for m in job.maps]
            self.events.append((self._now(), "assign", f"{task.id}@{w.id}"))
            if not w.conn.send(msg):
                task.status, task.worker = IDLE, None
                w.task = None

    def _check_heartbeats(self) -> None:
        limit = self.missed_heartbeats * self.heartbeat_ms / 1000.0
        now = self._now()
        for wid in [wid for wid, w in self.workers.items() if now - w.last_seen > limit]:
            self._declare_dead(wid, "missed heartbeats")

    def _declare_dead(self, wid: str, why: str) -> None:
        w = self.workers.pop(wid)
        self.dead.append(wid)
        self.events.append((self._now(), "dead", wid))
        log.info("worker %s declared dead (%s)", wid, why)
        w.conn.close()
        job = self._job
        if job is None:
            return
        reduce_pending = any(r.status != COMPLETED for r in job.reduces)
        for t in job.tasks():
            if t.status == IN_PROGRESS and t.worker == wid:
                t.status, t.worker = IDLE, None
            elif t.kind == "map" and t.status == COMPLETED and reduce_pending and t.location and t.location[0] == wid:
                # intermediate data lived on the dead worker
                t.status, t.worker, t.location = IDLE, None, None

    def _check_stall(self) -> None:
        if self._job is None or self.workers:
            self._no_workers_since = None
            return
        now = self._now()
        if self._no_workers_since is None:
            self._no_workers_since = now
        elif (now - self._no_workers_since) * 1000.0 > self.stall_limit_ms:
            self._fail_job("no live workers")

    # -- completion ----------------------------------------------------------

    def _finish(self, reply: dict) -> None:
        job = self._job
        self._job = None
        self._no_workers_since = None
        for w in self.workers.values():
            w.task = None
        if job is not None:
            reply["job"] = job.id
            reply["elapsed_ms"] = int((self._now() - job.started) * 1000)
            self.events.append((self._now(), "finish", job.id))
            job.client.send(reply)

    def _fail_job(self, error: str) -> None:
        if self._job is None:
            return
        log.info("job %s failed: %s", self._job.id, error)
        self._finish({"type": "result", "output": None, "error": error})

    def _complete_job(self) -> None:
        job = self._job
        reduced = [p for r in job.reduces for p in r.pairs]
        try:
            pairs = finalize(job.spec, reduced)
            result = job_result(job.spec, pairs)
        except ex.ExprFault as exc:
            self._fail_job(f"finalize failed: {exc}")
            return
        reply: dict[str, Any] = {"type": "result", "output": result, "error": None}
        if self.output_dir is not None:
            path = self.output_dir / f"{job.id}.tsv"
            path.write_text(format_output(pairs), encoding="utf-8")
            reply["output_file"] = str(path)
        self._finish(reply)
