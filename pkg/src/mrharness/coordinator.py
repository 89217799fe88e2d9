"""Coordination algorithm: register testers, run hierarchy levels in order with
per-action timeouts, collect local verdicts and compute the global verdict."""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable

from mrharness.model import Action, Schedule, TestCase, build_schedule
from mrharness.transport import (
    Message,
    MessageKind,
    PeerJoined,
    PeerLost,
    Session,
    TransportError,
)

log = logging.getLogger(__name__)

DEFAULT_REGISTRATION_WINDOW_MS = 10_000


class Outcome(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class LocalVerdict:
    action_id: str
    tester: str
    outcome: Outcome
    detail: str = ""
    elapsed_ms: int = 0
    # canonical serialization of the job output the action observed, if any
    observed: str | None = None

    def to_json(self) -> dict[str, Any]:
        out = {
            "action_id": self.action_id,
            "tester": self.tester,
            "outcome": self.outcome.value,
            "detail": self.detail,
            "elapsed_ms": self.elapsed_ms,
        }
        if self.observed is not None:
            out["observed"] = self.observed
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "LocalVerdict":
        return cls(
            action_id=obj["action_id"],
            tester=obj["tester"],
            outcome=Outcome(obj["outcome"]),
            detail=obj.get("detail", ""),
            elapsed_ms=int(obj.get("elapsed_ms", 0)),
            observed=obj.get("observed"),
        )


class DuplicateVerdict(ValueError):
    pass


class IncompleteLog(ValueError):
    pass


class RegistrationTimeout(TimeoutError):
    def __init__(self, missing: Iterable[str]):
        self.missing = sorted(missing, key=lambda t: (len(t), t))
        super().__init__(f"testers failed to register: {', '.join(self.missing)}")


class RegistrationError(RuntimeError):
    pass


class VerdictLog:
    """Append-only, at most one entry per (action, tester)."""

    def __init__(self, expected: Iterable[tuple[str, str]] | None = None) -> None:
        self.expected = None if expected is None else frozenset(expected)
        self._entries: list[LocalVerdict] = []
        self._keys: set[tuple[str, str]] = set()
        self._lock = threading.Lock()

    @classmethod
    def for_schedule(cls, schedule: Schedule) -> "VerdictLog":
        return cls((a, str(t)) for a, targets in schedule.entries.items() for t in targets)

    def append(self, verdict: LocalVerdict) -> None:
        key = (verdict.action_id, verdict.tester)
        with self._lock:
            if key in self._keys:
                raise DuplicateVerdict(f"second verdict for {key}")
            self._keys.add(key)
            self._entries.append(verdict)

    @property
    def entries(self) -> list[LocalVerdict]:
        with self._lock:
            return list(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def missing(self) -> set[tuple[str, str]]:
        if self.expected is None:
            return set()
        with self._lock:
            return set(self.expected - self._keys)

    def is_complete(self) -> bool:
        return not self.missing()

    def to_json(self) -> list[dict[str, Any]]:
        return [v.to_json() for v in self.entries]


@dataclass(frozen=True)
class GlobalVerdict:
    outcome: Outcome
    log: VerdictLog


def oracle(log: VerdictLog) -> Outcome:
    """fail > inconclusive > pass, so a single failure is never masked."""
    missing = log.missing()
    if missing:
        raise IncompleteLog(f"no verdict for {sorted(missing)}")
    outcomes = {v.outcome for v in log.entries}
    if Outcome.FAIL in outcomes:
        return Outcome.FAIL
    if Outcome.INCONCLUSIVE in outcomes:
        return Outcome.INCONCLUSIVE
    return Outcome.PASS


@dataclass
class TraceEvent:
    time_ms: float
    event: str  # execute | verdict | timeout | unreachable
    action_id: str
    tester: str


@dataclass
class _Pending:
    action: Action
    tester: str
    sent_ms: float

    @property
    def deadline(self) -> float:
        return self.sent_ms + self.action.timeout_ms


class Coordinator:
    """Runs test cases over a transport session.

    The session's clock is the only clock used: wall-clock monotonic time on
    the TCP backend, logical time on the simulator.
    """

    def __init__(self, session: Session, registration_window_ms: int = DEFAULT_REGISTRATION_WINDOW_MS) -> None:
        self.session = session
        self.registration_window_ms = registration_window_ms
        self.trace: list[TraceEvent] = []

    def _note(self, event: str, action_id: str, tester: str) -> None:
        self.trace.append(TraceEvent(self.session.now_ms(), event, action_id, tester))

    def _answer_ping(self, ev: Any) -> None:
        if isinstance(ev, Message) and ev.kind is MessageKind.PING:
            try:
                self.session.post(MessageKind.PONG, ev.sender)
            except TransportError:
                pass

    # -- registration ------------------------------------------------------------

    def register_testers(self, tc: TestCase) -> Schedule:
        schedule = build_schedule(tc)
        session = self.session
        names = {str(t) for t in tc.testers}
        deadline = session.now_ms() + self.registration_window_ms

        while not names <= session.connected():
            ev = session.poll(deadline)
            if ev is None and session.now_ms() >= deadline:
                raise RegistrationTimeout(names - session.connected())
            self._answer_ping(ev)

        for t in sorted(tc.testers):
            payload = {
                "role": tc.roles[t].value,
                "actions": [a.to_json() for a in tc.actions_for(t)],
            }
            try:
                session.post(MessageKind.REGISTER, str(t), payload)
            except TransportError as exc:
                raise RegistrationError(f"cannot register {t}: {exc}") from exc

        acked: set[str] = set()
        while acked != names:
            ev = session.poll(deadline)
            if ev is None:
                if session.now_ms() >= deadline:
                    raise RegistrationTimeout(names - acked)
                continue
            if isinstance(ev, PeerLost) and ev.peer in names and ev.peer not in acked:
                raise RegistrationError(f"{ev.peer} disconnected during registration")
            if isinstance(ev, Message) and ev.kind is MessageKind.REGISTER_ACK and ev.sender in names:
                role = ev.payload.get("role")
                want = tc.roles[next(t for t in tc.testers if str(t) == ev.sender)].value
                if role != want:
                    raise RegistrationError(f"{ev.sender} runs as {role}, test case needs {want}")
                acked.add(ev.sender)
            self._answer_ping(ev)
        return schedule

    # -- dispatch ----------------------------------------------------------------

    def dispatch_level(self, actions: Iterable[Action]) -> list[LocalVerdict]:
        session = self.session
        verdicts: list[LocalVerdict] = []
        pending: dict[tuple[str, str], _Pending] = {}
        start = session.now_ms()

        def settle(key: tuple[str, str], outcome: Outcome, detail: str, now: float,
                   observed: str | None = None) -> None:
            p = pending.pop(key)
            elapsed = max(0, int(math.floor(now - p.sent_ms + 1e-9)))
            if elapsed > p.action.timeout_ms and outcome is not Outcome.INCONCLUSIVE:
                outcome, detail, observed = Outcome.INCONCLUSIVE, "timeout", None
            verdicts.append(LocalVerdict(p.action.id, p.tester, outcome, detail, elapsed, observed))
            if outcome is Outcome.INCONCLUSIVE and detail in ("timeout", "tester unreachable"):
                self._note("timeout" if detail == "timeout" else "unreachable", p.action.id, p.tester)
            else:
                self._note("verdict", p.action.id, p.tester)

        for action in actions:
            payload = {
                "action_id": action.id,
                "instructions": [i.to_json() for i in action.instructions],
                "timeout_ms": action.timeout_ms,
            }
            for t in sorted(action.targets):
                key = (action.id, str(t))
                pending[key] = _Pending(action, str(t), start)
                try:
                    session.post(MessageKind.EXECUTE, str(t), payload)
                except TransportError:
                    settle(key, Outcome.INCONCLUSIVE, "tester unreachable", start)
                    continue
                self._note("execute", action.id, str(t))

        while pending:
            deadline = min(p.deadline for p in pending.values())
            ev = session.poll(deadline)
            now = session.now_ms()
            if isinstance(ev, Message) and ev.kind is MessageKind.VERDICT:
                key = (ev.payload.get("action_id"), ev.sender)
                if key in pending:
                    try:
                        reported = LocalVerdict.from_json(ev.payload)
                    except (KeyError, ValueError) as exc:
                        settle(key, Outcome.FAIL, f"malformed verdict: {exc}", now)
                    else:
                        settle(key, reported.outcome, reported.detail, now, reported.observed)
                else:
                    log.debug("ignoring late verdict %s", key)
            elif isinstance(ev, PeerLost):
                for key in [k for k, p in pending.items() if p.tester == ev.peer]:
                    settle(key, Outcome.INCONCLUSIVE, "tester unreachable", now)
            else:
                self._answer_ping(ev)
            for key in [k for k, p in pending.items() if p.deadline <= now]:
                if ev is None or now > pending[key].deadline:
                    settle(key, Outcome.INCONCLUSIVE, "timeout", now)
        return verdicts

    def run_test(self, tc: TestCase) -> GlobalVerdict:
        schedule = self.register_testers(tc)
        vlog = VerdictLog.for_schedule(schedule)
        for _level, actions in schedule.levels:
            for v in self.dispatch_level(actions):
                vlog.append(v)
        return GlobalVerdict(oracle(vlog), vlog)

    def shutdown_testers(self, testers: Iterable[str]) -> None:
        for t in testers:
            try:
                self.session.post(MessageKind.SHUTDOWN, t)
            except TransportError:
                pass


def run_test(tc: TestCase, session: Session, registration_window_ms: int = DEFAULT_REGISTRATION_WINDOW_MS) -> GlobalVerdict:
    return Coordinator(session, registration_window_ms).run_test(tc)
