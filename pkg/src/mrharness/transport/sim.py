"""Deterministic discrete-event network for exercising the coordination
protocol without sockets or wall-clock time.

Everything is single-threaded: nothing happens until `sim_advance` (or a
session `poll`) moves the logical clock.
"""

from __future__ import annotations

import heapq
import itertools
import random
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Union

from mrharness.transport.base import Event, PeerLost, PeerUnreachable, Session, SessionClosed
from mrharness.transport.wire import Message, MessageKind

Latency = Union[int, tuple[int, int]]


@dataclass(frozen=True)
class SimConfig:
    latency_ms: Latency = 1
    drop_probability: float = 0.0
    rng_seed: int = 0
    link_latency: Mapping[tuple[str, str], Latency] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ValueError("drop_probability must be in [0, 1]")
        for lat in (self.latency_ms, *self.link_latency.values()):
            lo, hi = (lat, lat) if isinstance(lat, int) else lat
            if lo < 0 or hi < lo:
                raise ValueError(f"bad latency {lat!r}")


@dataclass(frozen=True)
class TraceEntry:
    time: float
    event: str  # "send", "deliver" or "drop"
    msg: Message


class SimNetwork:
    def __init__(self, config: SimConfig | None = None) -> None:
        self.config = config or SimConfig()
        self.clock: float = 0
        self.trace: list[TraceEntry] = []
        self._rng = random.Random(self.config.rng_seed)
        self._heap: list[tuple] = []
        self._counter = itertools.count()
        self._nodes: dict[str, Callable[[Message], None]] = {}
        self._last_delivery: dict[tuple[str, str], float] = {}
        self._down: set[str] = set()

    # -- topology --------------------------------------------------------------

    def attach(self, name: str, handler: Callable[[Message], None]) -> None:
        self._nodes[name] = handler
        self._down.discard(name)

    def nodes(self) -> set[str]:
        return set(self._nodes) - self._down

    def crash(self, name: str) -> None:
        """Node stops receiving; connected peers observe a lost connection."""
        if name in self._down or name not in self._nodes:
            return
        self._down.add(name)
        for other, handler in self._nodes.items():
            if other != name and other not in self._down and getattr(handler, "wants_peer_events", False):
                handler.peer_lost(name)

    # -- scheduling ------------------------------------------------------------

    def _latency(self, sender: str, recipient: str) -> float:
        lat = self.config.link_latency.get((sender, recipient), self.config.latency_ms)
        if isinstance(lat, int):
            return lat
        return self._rng.randint(lat[0], lat[1])

    def send(self, msg: Message) -> None:
        self.trace.append(TraceEntry(self.clock, "send", msg))
        dropped = self._rng.random() < self.config.drop_probability
        latency = self._latency(msg.sender, msg.recipient)
        if dropped:
            self.trace.append(TraceEntry(self.clock, "drop", msg))
            return
        stream = (msg.sender, msg.recipient)
        # per-stream FIFO: never deliver before an earlier message on the same stream
        at = max(self.clock + latency, self._last_delivery.get(stream, 0))
        self._last_delivery[stream] = at
        heapq.heappush(self._heap, (at, msg.seq, next(self._counter), msg))

    def call_at(self, at: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (max(at, self.clock), 0, next(self._counter), fn))

    def next_time(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def step(self) -> TraceEntry | None:
        """Process the earliest event; returns the delivery entry, if any."""
        at, _, _, item = heapq.heappop(self._heap)
        self.clock = max(self.clock, at)
        if callable(item) and not isinstance(item, Message):
            item()
            return None
        handler = self._nodes.get(item.recipient)
        if handler is None or item.recipient in self._down:
            entry = TraceEntry(self.clock, "drop", item)
            self.trace.append(entry)
            return None
        entry = TraceEntry(self.clock, "deliver", item)
        self.trace.append(entry)
        handler(item)
        return entry

    def sim_advance(self, until: float) -> list[TraceEntry]:
        """Deliver every event due at or before `until`; returns deliveries."""
        delivered = []
        while self._heap and self._heap[0][0] <= until:
            entry = self.step()
            if entry is not None:
                delivered.append(entry)
        self.clock = max(self.clock, until)
        return delivered


class _Inbox:
    wants_peer_events = True

    def __init__(self) -> None:
        self.events: deque[Event] = deque()

    def __call__(self, msg: Message) -> None:
        self.events.append(msg)

    def peer_lost(self, name: str) -> None:
        self.events.append(PeerLost(name))


class SimSession(Session):
    """Coordinator session over a SimNetwork. `poll` drives the simulation."""

    backend = "sim"

    def __init__(self, network: SimNetwork, name: str = "coordinator") -> None:
        super().__init__(name)
        self.network = network
        self._inbox = _Inbox()
        self._closed = False
        network.attach(name, self._inbox)

    def now_ms(self) -> float:
        return self.network.clock

    def connected(self) -> set[str]:
        return self.network.nodes() - {self.name}

    def send(self, msg: Message) -> None:
        if self._closed:
            raise SessionClosed("simulated session is closed")
        if msg.recipient not in self.connected():
            raise PeerUnreachable(f"{msg.recipient} is not connected")
        self.network.send(msg)

    def poll(self, deadline_ms: float) -> Event | None:
        while not self._inbox.events:
            nxt = self.network.next_time()
            if nxt is None or nxt > deadline_ms:
                self.network.clock = max(self.network.clock, deadline_ms)
                return None
            self.network.step()
        return self._inbox.events.popleft()

    def close(self) -> None:
        self._closed = True


# returned by a behavior when the action observed no job output
NO_OBSERVATION = object()

# behavior(tester, action_id, instructions, timeout_ms) -> (outcome, detail, duration_ms, observed)
Behavior = Callable[[str, str, list, int], tuple[str, str, float, Any]]


class SimTester:
    """In-simulation tester whose action results come from a `behavior`
    callable. Actions queue and run one at a time."""

    def __init__(self, network: SimNetwork, name: str, role: str, behavior: Behavior) -> None:
        self.network = network
        self.name = name
        self.role = role
        self.behavior = behavior
        self.executed: list[tuple[float, str]] = []
        self._busy_until: float = 0
        self._seq: dict[str, int] = {}
        network.attach(name, self._on_message)

    def _post(self, kind: MessageKind, recipient: str, payload: dict[str, Any] | None = None) -> None:
        if self.name not in self.network.nodes():
            return
        seq = self._seq.get(recipient, 0) + 1
        self._seq[recipient] = seq
        self.network.send(Message(kind, self.name, recipient, seq, payload or {}))

    def _on_message(self, msg: Message) -> None:
        if msg.kind is MessageKind.REGISTER:
            self._post(MessageKind.REGISTER_ACK, msg.sender, {"role": self.role})
        elif msg.kind is MessageKind.PING:
            self._post(MessageKind.PONG, msg.sender)
        elif msg.kind is MessageKind.EXECUTE:
            p = msg.payload
            outcome, detail, duration, observed = self.behavior(
                self.name, p["action_id"], p["instructions"], p["timeout_ms"]
            )
            start = max(self.network.clock, self._busy_until)
            finish = start + duration
            self._busy_until = finish
            self.executed.append((start, p["action_id"]))
            verdict = {
                "action_id": p["action_id"],
                "tester": self.name,
                "outcome": outcome,
                "detail": detail,
                "elapsed_ms": int(round(finish - start)),
            }
            if observed is not NO_OBSERVATION:
                verdict["observed"] = observed
            self.network.call_at(finish, lambda: self._post(MessageKind.VERDICT, msg.sender, verdict))

    def crash_at(self, at: float) -> None:
        self.network.call_at(at, lambda: self.network.crash(self.name))

