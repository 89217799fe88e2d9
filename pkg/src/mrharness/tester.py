"""Per-node tester agent.

A tester controls its SUT node only from the outside: it spawns and kills
minimr processes and talks to the master through the public job API.
"""

from __future__ import annotations

import argparse
import logging
import os
import queue
import signal
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Protocol

from mrharness.coordinator import LocalVerdict, Outcome
from mrharness.jobs.registry import JobArgsError, UnknownJob, build_job
from mrharness.minimr.client import MasterUnreachable, submit_job
from mrharness.minimr.kv import canonical
from mrharness.minimr.master import DEFAULT_MR_PORT, HEARTBEAT_MS, Master
from mrharness.minimr.reference import run_reference
from mrharness.minimr.worker import Worker
from mrharness.model import Instruction, Opcode, Role, instruction_errors
from mrharness.transport import MessageKind
from mrharness.transport.real import TesterLink
from mrharness.transport.sim import NO_OBSERVATION
from mrharness.transport.wire import parse_endpoint

log = logging.getLogger(__name__)

STOP_GRACE_S = 1.0


class _Absent:
    def __repr__(self) -> str:
        return "ABSENT"


ABSENT: Any = _Absent()  # no job output retrieved yet; None is the NULL output


# -- value comparison ------------------------------------------------------------


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def round4(value: float | int) -> Decimal:
    """Round half-up to 4 decimals, on the shortest decimal repr of `value`."""
    return Decimal(repr(value)).quantize(Decimal("0.0001"), rounding=ROUND_HALF_UP)


def compare(observed: Any, expected: Any, mode: str, tol: float | None = None) -> tuple[Outcome, str]:
    if observed is ABSENT:
        return Outcome.INCONCLUSIVE, "no output retrievable"
    if mode == "exact":
        if canonical(observed) == canonical(expected):
            return Outcome.PASS, f"output {canonical(observed)} matches"
        return Outcome.FAIL, f"expected {canonical(expected)}, observed {canonical(observed)}"
    if observed is None:
        return Outcome.FAIL, "observed NULL"
    if not _is_number(observed) or not _is_number(expected):
        return Outcome.FAIL, f"{mode} needs numeric values, got {canonical(observed)} vs {canonical(expected)}"
    if mode == "round4":
        try:
            obs, exp = round4(observed), round4(expected)
        except InvalidOperation as exc:
            return Outcome.FAIL, f"cannot round: {exc}"
        if obs == exp:
            return Outcome.PASS, f"{obs} == {exp} (round4)"
        return Outcome.FAIL, f"expected {exp}, observed {obs} (round4)"
    if mode == "abs_tol":
        if not _is_number(tol):
            return Outcome.FAIL, "abs_tol needs a numeric tol"
        diff = abs(observed - expected)
        if diff <= tol:
            return Outcome.PASS, f"|{observed} - {expected}| = {diff} <= {tol}"
        return Outcome.FAIL, f"|{observed} - {expected}| = {diff} > {tol}"
    return Outcome.FAIL, f"unknown comparison mode {mode!r}"


# -- SUT process handles ---------------------------------------------------------


class Handle(Protocol):
    kind: str
    name: str

    @property
    def alive(self) -> bool: ...

    def kill(self) -> None: ...

    def terminate(self, grace_s: float = STOP_GRACE_S) -> None: ...


def _die_with_parent() -> None:
    # Linux: SIGKILL the child if the tester dies, so no SUT process is orphaned
    try:
        import ctypes

        ctypes.CDLL("libc.so.6", use_errno=True).prctl(1, signal.SIGKILL)  # PR_SET_PDEATHSIG
    except (OSError, AttributeError):
        pass


@dataclass
class ProcessHandle:
    kind: str
    name: str
    proc: subprocess.Popen
    address: tuple[str, int] | None = None

    @property
    def alive(self) -> bool:
        return self.proc.poll() is None

    @property
    def pid(self) -> int:
        return self.proc.pid

    def kill(self) -> None:
        if self.alive:
            self.proc.kill()
        self.proc.wait()

    def terminate(self, grace_s: float = STOP_GRACE_S) -> None:
        if self.alive:
            self.proc.terminate()
            try:
                self.proc.wait(grace_s)
            except subprocess.TimeoutExpired:
                self.proc.kill()
        self.proc.wait()


@dataclass
class InProcessHandle:
    kind: str
    name: str
    node: Master | Worker
    address: tuple[str, int] | None = None
    _dead: bool = False

    @property
    def alive(self) -> bool:
        return not self._dead

    def kill(self) -> None:
        self._dead = True
        self.node.kill()

    def terminate(self, grace_s: float = STOP_GRACE_S) -> None:
        self._dead = True
        self.node.stop()


# -- the tester ------------------------------------------------------------------


@dataclass
class TesterConfig:
    __test__ = False

    mr_host: str = "127.0.0.1"
    mr_port: int = DEFAULT_MR_PORT
    heartbeat_ms: int = HEARTBEAT_MS
    spawn: str = "process"  # "process" | "thread"
    work_dir: str | None = None


class InstructionFailed(Exception):
    def __init__(self, outcome: Outcome, detail: str):
        super().__init__(detail)
        self.outcome = outcome
        self.detail = detail


@dataclass
class Tester:
    __test__ = False

    id: str
    role: Role
    config: TesterConfig = field(default_factory=TesterConfig)
    managed: list = field(default_factory=list)
    last_job_output: Any = ABSENT
    _worker_seq: int = 0

    def __post_init__(self) -> None:
        if self.config.work_dir is None:
            self.config.work_dir = tempfile.mkdtemp(prefix=f"mrharness-{self.id}-")

    # -- bookkeeping --

    @property
    def master(self) -> Handle | None:
        return next((h for h in self.managed if h.kind == "master"), None)

    @property
    def workers(self) -> list[Handle]:
        return [h for h in self.managed if h.kind == "worker"]

    def _require(self, role: Role, opcode: Opcode) -> None:
        if self.role is not role:
            raise InstructionFailed(Outcome.FAIL, f"{opcode.value} requires a {role.value}-controller, {self.id} is {self.role.value}")

    # -- instructions --

    def start_master(self) -> Handle:
        self._require(Role.MASTER, Opcode.START_MASTER)
        if self.master is not None:
            if self.master.alive:
                raise InstructionFailed(Outcome.FAIL, "master already running")
            self.managed.remove(self.master)
        cfg = self.config
        try:
            listener = socket.create_server((cfg.mr_host, cfg.mr_port))
        except OSError as exc:
            raise InstructionFailed(Outcome.FAIL, f"cannot bind master endpoint {cfg.mr_host}:{cfg.mr_port}: {exc}") from None
        address = listener.getsockname()[:2]
        if cfg.spawn == "thread":
            node = Master(listener=listener, heartbeat_ms=cfg.heartbeat_ms, output_dir=cfg.work_dir).start()
            handle: Handle = InProcessHandle("master", f"{self.id}-master", node, address)
        else:
            fd = listener.fileno()
            cmd = [sys.executable, "-m", "mrharness.minimr", "master", "--listen-fd", str(fd),
                   "--heartbeat-ms", str(cfg.heartbeat_ms), "--output-dir", cfg.work_dir]
            try:
                proc = self._spawn(cmd, pass_fds=(fd,), log_name="master")
            except OSError as exc:
                raise InstructionFailed(Outcome.FAIL, f"cannot spawn master: {exc}") from None
            finally:
                listener.close()
            handle = ProcessHandle("master", f"{self.id}-master", proc, address)
        self.managed.append(handle)
        return handle

    def start_worker(self) -> Handle:
        self._require(Role.WORKER, Opcode.START_WORKERS)
        cfg = self.config
        self._worker_seq += 1
        name = f"{self.id}-w{self._worker_seq}"
        master = (cfg.mr_host, cfg.mr_port)
        if cfg.spawn == "thread":
            try:
                node = Worker(master, name, heartbeat_ms=cfg.heartbeat_ms).start()
            except OSError as exc:
                raise InstructionFailed(Outcome.FAIL, f"cannot start worker: {exc}") from None
            handle: Handle = InProcessHandle("worker", name, node)
        else:
            cmd = [sys.executable, "-m", "mrharness.minimr", "worker", "--master", f"{cfg.mr_host}:{cfg.mr_port}",
                   "--id", name, "--heartbeat-ms", str(cfg.heartbeat_ms)]
            try:
                handle = ProcessHandle("worker", name, self._spawn(cmd, log_name=name))
            except OSError as exc:
                raise InstructionFailed(Outcome.FAIL, f"cannot spawn worker: {exc}") from None
        self.managed.append(handle)
        return handle

    def _spawn(self, cmd: list[str], pass_fds=(), log_name: str = "node") -> subprocess.Popen:
        logfile = open(Path(self.config.work_dir) / f"{log_name}.log", "ab")
        try:
            return subprocess.Popen(cmd, stdin=subprocess.DEVNULL, stdout=logfile, stderr=logfile,
                                    pass_fds=pass_fds, preexec_fn=_die_with_parent if sys.platform == "linux" else None)
        finally:
            logfile.close()

    def send_job(self, job: str, args: dict, timeout_s: float | None) -> Any:
        self._require(Role.MASTER, Opcode.SEND_JOB)
        master = self.master
        if master is None or not master.alive:
            raise InstructionFailed(Outcome.FAIL, "master not running")
        try:
            spec = build_job(job, args)
        except UnknownJob:
            raise InstructionFailed(Outcome.FAIL, f"unknown job {job!r}") from None
        except (JobArgsError, ValueError, OSError) as exc:
            raise InstructionFailed(Outcome.FAIL, f"bad job args: {exc}") from None
        try:
            result = submit_job(master.address, spec, timeout_s)
        except TimeoutError:
            raise InstructionFailed(Outcome.INCONCLUSIVE, "job did not finish before the action timeout") from None
        except MasterUnreachable as exc:
            # the master died or stopped mid-job: no output to record
            raise InstructionFailed(Outcome.INCONCLUSIVE, str(exc)) from None
        self.last_job_output = result.output
        return result

    def drop_worker(self) -> Handle:
        self._require(Role.WORKER, Opcode.DROP_WORKER)
        victims = [h for h in self.workers if h.alive]
        if not victims:
            raise InstructionFailed(Outcome.FAIL, "no worker to drop")
        victim = victims[0]
        victim.kill()
        self.managed.remove(victim)
        return victim

    def assert_output(self, expected: Any, mode: str, tol: float | None = None) -> tuple[Outcome, str]:
        return compare(self.last_job_output, expected, mode, tol)

    def stop_workers(self) -> str:
        self._require(Role.WORKER, Opcode.STOP_WORKERS)
        workers = self.workers
        for h in workers:
            h.terminate(STOP_GRACE_S)
            self.managed.remove(h)
        return f"stopped {len(workers)} worker(s)" if workers else "already stopped"

    def stop_master(self) -> str:
        self._require(Role.MASTER, Opcode.STOP_MASTER)
        master = self.master
        if master is None:
            return "already stopped"
        master.terminate(STOP_GRACE_S)
        self.managed.remove(master)
        return "master stopped"

    def cleanup(self) -> None:
        """Kill everything still managed (used on shutdown and disconnect)."""
        for h in list(self.managed):
            try:
                h.terminate(0.2)
            except Exception:  # best effort; never leave the rest running
                log.exception("cleanup of %s failed", h.name)
        self.managed.clear()

    # -- action execution --

    def run_instruction(self, ins: Instruction, deadline: float) -> tuple[Outcome, str]:
        errors = instruction_errors(ins)
        if errors:
            return Outcome.FAIL, "malformed instruction: " + "; ".join(errors)
        op, args = ins.opcode, ins.args
        try:
            if op is Opcode.START_MASTER:
                h = self.start_master()
                return Outcome.PASS, f"master listening on {h.address[0]}:{h.address[1]}"
            if op is Opcode.START_WORKERS:
                names = [self.start_worker().name for _ in range(args.get("count", 1))]
                return Outcome.PASS, "started " + ", ".join(names)
            if op is Opcode.SEND_JOB:
                result = self.send_job(args["job"], args["args"], max(0.0, deadline - time.monotonic()))
                if result.is_null:
                    return Outcome.PASS, f"job returned NULL ({result.error})"
                return Outcome.PASS, f"job output {canonical(result.output)[:200]}"
            if op is Opcode.DROP_WORKER:
                return Outcome.PASS, f"dropped {self.drop_worker().name}"
            if op is Opcode.ASSERT_OUTPUT:
                return self.assert_output(args["expected"], args["mode"], args.get("tol"))
            if op is Opcode.STOP_WORKERS:
                return Outcome.PASS, self.stop_workers()
            if op is Opcode.STOP_MASTER:
                return Outcome.PASS, self.stop_master()
            if op is Opcode.SLEEP:
                time.sleep(args["ms"] / 1000.0)
                return Outcome.PASS, f"slept {args['ms']} ms"
        except InstructionFailed as exc:
            return exc.outcome, exc.detail
        return Outcome.FAIL, f"unsupported opcode {op}"

    def execute(self, action_id: str, instructions: list[Instruction], timeout_ms: int) -> LocalVerdict:
        """Run instructions in order; the first non-pass result decides."""
        start = time.monotonic()
        deadline = start + timeout_ms / 1000.0
        outcome, details = Outcome.PASS, []
        for ins in instructions:
            try:
                outcome, detail = self.run_instruction(ins, deadline)
            except Exception as exc:  # a verdict is owed no matter what broke
                log.exception("instruction %s crashed", ins.opcode)
                outcome, detail = Outcome.INCONCLUSIVE, f"tester error: {type(exc).__name__}: {exc}"
            details.append(detail)
            if outcome is not Outcome.PASS:
                break
            if time.monotonic() > deadline:
                outcome = Outcome.INCONCLUSIVE
                details.append("local deadline exceeded")
                break
        elapsed = int((time.monotonic() - start) * 1000)
        observed = None if self.last_job_output is ABSENT else canonical(self.last_job_output)
        touches_output = any(i.opcode in (Opcode.SEND_JOB, Opcode.ASSERT_OUTPUT) for i in instructions)
        return LocalVerdict(action_id, self.id, outcome, "; ".join(details), elapsed,
                            observed if touches_output else None)


# -- agent loop ------------------------------------------------------------------


class TesterAgent:
    """Connects a Tester to the coordinator. The receive path stays
    responsive while an action runs on the executor thread."""

    __test__ = False


    def __init__(self, tester: Tester, link: TesterLink) -> None:
        self.tester = tester
        self.link = link
        self._actions: queue.Queue = queue.Queue()
        self._done = threading.Event()

    def _executor(self) -> None:
        while True:
            item = self._actions.get()
            if item is None:
                return
            sender, payload = item
            try:
                instructions = [Instruction.from_json(i) for i in payload["instructions"]]
            except (KeyError, ValueError, TypeError) as exc:
                verdict = LocalVerdict(payload.get("action_id", "?"), self.tester.id, Outcome.FAIL,
                                       f"malformed EXECUTE: {exc}")
            else:
                verdict = self.tester.execute(payload["action_id"], instructions, int(payload["timeout_ms"]))
            try:
                self.link.post(MessageKind.VERDICT, sender, verdict.to_json())
            except Exception:
                log.warning("could not report verdict for %s", verdict.action_id)

    def serve(self) -> None:
        executor = threading.Thread(target=self._executor, daemon=True, name=f"{self.tester.id}-executor")
        executor.start()
        try:
            while not self._done.is_set():
                msg = self.link.recv()
                if msg is None:
                    log.info("%s lost its coordinator", self.tester.id)
                    break
                if msg.kind is MessageKind.REGISTER:
                    self.link.post(MessageKind.REGISTER_ACK, msg.sender, {"role": self.tester.role.value})
                elif msg.kind is MessageKind.EXECUTE:
                    self._actions.put((msg.sender, msg.payload))
                elif msg.kind is MessageKind.PING:
                    self.link.post(MessageKind.PONG, msg.sender)
                elif msg.kind is MessageKind.SHUTDOWN:
                    break
        finally:
            self._actions.put(None)
            executor.join(timeout=5.0)
            self.tester.cleanup()
            self.link.close()

    def stop(self) -> None:
        self._done.set()


# -- dry-run behavior for the simulated backend -----------------------------------


class DryRun:
    """Sim-backend stand-in for real testers: jobs run on the reference
    executor, process control always succeeds, SLEEP consumes logical time."""

    def __init__(self, job_duration_ms: float = 10.0) -> None:
        self.job_duration_ms = job_duration_ms
        self.outputs: dict[str, Any] = {}

    def __call__(self, tester: str, action_id: str, instructions: list, timeout_ms: int):
        duration = 1.0
        observed: Any = NO_OBSERVATION
        outcome, details = Outcome.PASS, []
        for raw in instructions:
            ins = Instruction.from_json(raw)
            errors = instruction_errors(ins)
            if errors:
                outcome, detail = Outcome.FAIL, "malformed instruction: " + "; ".join(errors)
            elif ins.opcode is Opcode.SEND_JOB:
                try:
                    self.outputs[tester] = run_reference(build_job(ins.args["job"], ins.args["args"]))
                    detail = "job ran on reference executor"
                except (UnknownJob, JobArgsError, ValueError, OSError) as exc:
                    outcome, detail = Outcome.FAIL, f"bad job: {exc}"
                duration += self.job_duration_ms
                observed = canonical(self.outputs.get(tester))
            elif ins.opcode is Opcode.ASSERT_OUTPUT:
                obs = self.outputs.get(tester, ABSENT)
                outcome, detail = compare(obs, ins.args["expected"], ins.args["mode"], ins.args.get("tol"))
                if obs is not ABSENT:
                    observed = canonical(obs)
            elif ins.opcode is Opcode.SLEEP:
                duration += ins.args["ms"]
                detail = f"slept {ins.args['ms']} ms"
            else:
                detail = f"{ins.opcode.value} (dry run)"
            details.append(detail)
            if outcome is not Outcome.PASS:
                break
        return outcome.value, "; ".join(details), duration, observed


# -- process entry point -----------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="mrharness tester")
    parser.add_argument("--coordinator", required=True, help="host:port of the coordinator")
    parser.add_argument("--id", required=True, help="tester id, e.g. t0")
    parser.add_argument("--role", required=True, choices=[r.value for r in Role])
    parser.add_argument("--mr-host", default="127.0.0.1")
    parser.add_argument("--mr-port", type=int, default=DEFAULT_MR_PORT)
    parser.add_argument("--heartbeat-ms", type=int, default=HEARTBEAT_MS)
    parser.add_argument("--work-dir")
    parser.add_argument("--connect-timeout", type=float, default=10.0)
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format=f"%(asctime)s {args.id} %(levelname)s %(message)s")

    config = TesterConfig(args.mr_host, args.mr_port, args.heartbeat_ms, "process", args.work_dir)
    tester = Tester(args.id, Role(args.role), config)
    link = TesterLink(args.id, parse_endpoint(args.coordinator))

    def on_term(signum, frame):
        tester.cleanup()
        os._exit(0)

    signal.signal(signal.SIGTERM, on_term)
    try:
        link.connect(args.connect_timeout)
    except Exception as exc:
        print(f"{args.id}: {exc}", file=sys.stderr)
        return 3
    TesterAgent(tester, link).serve()
    return 0


if __name__ == "__main__":
    sys.exit(main())
