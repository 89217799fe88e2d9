from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Union

from mrharness.transport.wire import Message, MessageKind


class TransportError(Exception):
    pass


class SessionClosed(TransportError):
    """Send attempted on a closed session."""


class PeerUnreachable(TransportError):
    """The recipient has no live connection."""


@dataclass(frozen=True)
class PeerJoined:
    peer: str


@dataclass(frozen=True)
class PeerLost:
    peer: str


Event = Union[Message, PeerJoined, PeerLost]


class Session:
    """Coordinator-side view of a transport.

    Backends implement `now_ms`, `send`, `poll`, `connected` and `close`.
    `poll(deadline)` returns the next inbound event, or None once the
    backend's clock reaches `deadline` with nothing to deliver.
    """

    backend = "abstract"

    def __init__(self, name: str) -> None:
        self.name = name
        self._seq: dict[str, int] = {}
        self._seq_lock = threading.Lock()

    def message(self, kind: MessageKind, recipient: str, payload: dict[str, Any] | None = None) -> Message:
        with self._seq_lock:
            seq = self._seq.get(recipient, 0) + 1
            self._seq[recipient] = seq
        return Message(kind, self.name, recipient, seq, payload or {})

    def post(self, kind: MessageKind, recipient: str, payload: dict[str, Any] | None = None) -> Message:
        msg = self.message(kind, recipient, payload)
        self.send(msg)
        return msg

    def now_ms(self) -> float:
        raise NotImplementedError

    def send(self, msg: Message) -> None:
        raise NotImplementedError

    def poll(self, deadline_ms: float) -> Event | None:
        raise NotImplementedError

    def connected(self) -> set[str]:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError
