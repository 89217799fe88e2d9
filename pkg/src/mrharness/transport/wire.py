"""Length-prefixed JSON framing.

Frame = 4-byte big-endian payload length, then that many bytes of UTF-8 JSON.
The harness `Message` and the minimr engine's own frames share this format.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

_HEADER = struct.Struct("!I")
MAX_FRAME = 64 * 1024 * 1024


class FramingError(ValueError):
    pass


class MessageKind(str, Enum):
    REGISTER = "REGISTER"
    REGISTER_ACK = "REGISTER_ACK"
    EXECUTE = "EXECUTE"
    VERDICT = "VERDICT"
    PING = "PING"
    PONG = "PONG"
    SHUTDOWN = "SHUTDOWN"


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: str
    recipient: str
    seq: int
    payload: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "sender": self.sender,
            "recipient": self.recipient,
            "seq": self.seq,
            "payload": self.payload,
        }

    @classmethod
    def from_json(cls, obj: Any) -> "Message":
        if not isinstance(obj, dict) or set(obj) != {"kind", "sender", "recipient", "seq", "payload"}:
            raise FramingError(f"not a message object: {obj!r}")
        try:
            kind = MessageKind(obj["kind"])
        except ValueError:
            raise FramingError(f"unknown message kind {obj['kind']!r}") from None
        if not isinstance(obj["seq"], int) or not isinstance(obj["payload"], dict):
            raise FramingError("bad seq or payload")
        return cls(kind, str(obj["sender"]), str(obj["recipient"]), obj["seq"], obj["payload"])


def encode_frame(obj: Any) -> bytes:
    body = json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise FramingError(f"frame of {len(body)} bytes exceeds limit")
    return _HEADER.pack(len(body)) + body


def decode_frame(data: bytes) -> tuple[Any, bytes]:
    """Decode one frame from the front of `data`; returns (object, rest)."""
    if len(data) < _HEADER.size:
        raise FramingError("truncated header")
    (n,) = _HEADER.unpack_from(data)
    if n > MAX_FRAME:
        raise FramingError(f"frame length {n} exceeds limit")
    end = _HEADER.size + n
    if len(data) < end:
        raise FramingError("truncated body")
    try:
        obj = json.loads(data[_HEADER.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(str(exc)) from None
    return obj, data[end:]


def encode_message(msg: Message) -> bytes:
    return encode_frame(msg.to_json())


def decode_message(data: bytes) -> Message:
    obj, rest = decode_frame(data)
    if rest:
        raise FramingError("trailing bytes after frame")
    return Message.from_json(obj)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> Any | None:
    """Blocking read of one frame; None on clean EOF."""
    header = _recv_exact(sock, _HEADER.size)
    if header is None:
        return None
    (n,) = _HEADER.unpack(header)
    if n > MAX_FRAME:
        raise FramingError(f"frame length {n} exceeds limit")
    body = _recv_exact(sock, n)
    if body is None:
        raise FramingError("connection closed mid-frame")
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(str(exc)) from None


def write_frame(sock: socket.socket, obj: Any) -> None:
    sock.sendall(encode_frame(obj))


def parse_endpoint(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port = default_host, text
    return host or default_host, int(port)
