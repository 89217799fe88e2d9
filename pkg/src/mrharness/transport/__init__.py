"""Coordinator/tester message layer: TCP backend and deterministic simulator."""

from mrharness.transport.base import (
    Event,
    PeerJoined,
    PeerLost,
    PeerUnreachable,
    Session,
    SessionClosed,
    TransportError,
)
from mrharness.transport.wire import Message, MessageKind

__all__ = [
    "Event",
    "Message",
    "MessageKind",
    "PeerJoined",
    "PeerLost",
    "PeerUnreachable",
    "Session",
    "SessionClosed",
    "TransportError",
]
