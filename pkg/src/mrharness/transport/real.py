"""TCP backend: one connection per tester, framed JSON messages."""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from typing import Any

from mrharness.transport.base import (
    Event,
    PeerJoined,
    PeerLost,
    PeerUnreachable,
    Session,
    SessionClosed,
    TransportError,
)
from mrharness.transport.wire import FramingError, Message, MessageKind, encode_message, read_frame

log = logging.getLogger(__name__)

DEFAULT_PORT = 7717
_STOP = object()


class Connection:
    """A framed socket with a dedicated writer thread so sends never block
    the caller. Inbound messages are handed to `on_message`."""

    def __init__(self, sock: socket.socket, on_message, on_close) -> None:
        self.sock = sock
        self.peer: str | None = None
        self._out: queue.Queue = queue.Queue()
        self._on_message = on_message
        self._on_close = on_close
        self._closed = threading.Event()
        self._close_lock = threading.Lock()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._writer = threading.Thread(target=self._write_loop, daemon=True)

    def start(self) -> None:
        self._reader.start()
        self._writer.start()

    @property
    def closed(self) -> bool:
        return self._closed.is_set()

    def send(self, msg: Message) -> None:
        if self.closed:
            raise PeerUnreachable(f"connection to {self.peer} is closed")
        self._out.put(encode_message(msg))

    def _write_loop(self) -> None:
        while True:
            data = self._out.get()
            if data is _STOP:
                return
            try:
                self.sock.sendall(data)
            except OSError:
                self.close()
                return

    def _read_loop(self) -> None:
        try:
            while not self.closed:
                obj = read_frame(self.sock)
                if obj is None:
                    break
                self._on_message(self, Message.from_json(obj))
        except (OSError, FramingError) as exc:
            if not self.closed:
                log.debug("connection to %s failed: %s", self.peer, exc)
        finally:
            self.close()

    def flush(self, timeout: float = 1.0) -> None:
        """Wait (briefly) for queued frames to be written."""
        end = time.monotonic() + timeout
        while not self._out.empty() and time.monotonic() < end and not self.closed:
            time.sleep(0.005)

    def close(self) -> None:
        with self._close_lock:
            if self._closed.is_set():
                return
            self._closed.set()
        self._out.put(_STOP)
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self._on_close(self)


class CoordinatorServer(Session):
    """Listening coordinator session. A tester identifies itself with a PING
    as its first message; it is then reachable under its sender name."""

    backend = "real"

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, name: str = "coordinator") -> None:
        super().__init__(name)
        self._listener = socket.create_server((host, port), reuse_port=False)
        self.address = self._listener.getsockname()[:2]
        self._inbox: queue.Queue[Event] = queue.Queue()
        self._peers: dict[str, Connection] = {}
        self._lock = threading.Lock()
        self._closed = False
        self._t0 = time.monotonic()
        self._accept = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept.start()

    @property
    def port(self) -> int:
        return self.address[1]

    def now_ms(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    def _accept_loop(self) -> None:
        while True:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            Connection(sock, self._on_message, self._on_close).start()

    def _on_message(self, conn: Connection, msg: Message) -> None:
        if conn.peer is None:
            if msg.kind is not MessageKind.PING:
                conn.close()
                return
            with self._lock:
                old = self._peers.get(msg.sender)
                conn.peer = msg.sender
                self._peers[msg.sender] = conn
            if old is not None and old is not conn:
                old.close()
            self._inbox.put(PeerJoined(msg.sender))
            conn.send(self.message(MessageKind.PONG, msg.sender))
            return
        if msg.sender != conn.peer:
            log.warning("dropping message from %s claiming to be %s", conn.peer, msg.sender)
            return
        self._inbox.put(msg)

    def _on_close(self, conn: Connection) -> None:
        if conn.peer is None:
            return
        with self._lock:
            if self._peers.get(conn.peer) is conn:
                del self._peers[conn.peer]
            else:
                return
        self._inbox.put(PeerLost(conn.peer))

    def connected(self) -> set[str]:
        with self._lock:
            return {p for p, c in self._peers.items() if not c.closed}

    def send(self, msg: Message) -> None:
        if self._closed:
            raise SessionClosed("coordinator session is closed")
        with self._lock:
            conn = self._peers.get(msg.recipient)
        if conn is None:
            raise PeerUnreachable(f"{msg.recipient} is not connected")
        conn.send(msg)

    def poll(self, deadline_ms: float) -> Event | None:
        timeout = max(0.0, (deadline_ms - self.now_ms()) / 1000.0)
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._listener.close()
        with self._lock:
            conns = list(self._peers.values())
        for c in conns:
            c.flush(0.5)
            c.close()


class TesterLink:
    """Tester-side connection to the coordinator."""

    __test__ = False


    def __init__(self, name: str, address: tuple[str, int]) -> None:
        self.name = name
        self.address = address
        self.inbox: queue.Queue[Message | None] = queue.Queue()
        self._conn: Connection | None = None
        self._seq = 0
        self._lock = threading.Lock()

    def connect(self, timeout_s: float = 10.0, retry_s: float = 0.05) -> None:
        deadline = time.monotonic() + timeout_s
        while True:
            try:
                sock = socket.create_connection(self.address, timeout=max(0.1, deadline - time.monotonic()))
                break
            except OSError:
                if time.monotonic() >= deadline:
                    raise TransportError(f"cannot reach coordinator at {self.address}") from None
                time.sleep(retry_s)
        sock.settimeout(None)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._conn = Connection(sock, lambda _c, m: self.inbox.put(m), lambda _c: self.inbox.put(None))
        self._conn.peer = "coordinator"
        self._conn.start()
        self.post(MessageKind.PING, "coordinator")

    def post(self, kind: MessageKind, recipient: str, payload: dict[str, Any] | None = None) -> None:
        if self._conn is None:
            raise SessionClosed("not connected")
        with self._lock:
            self._seq += 1
            msg = Message(kind, self.name, recipient, self._seq, payload or {})
        self._conn.send(msg)

    def recv(self, timeout: float | None = None) -> Message | None:
        """Next message; None when the connection is gone. Raises queue.Empty on timeout."""
        return self.inbox.get(timeout=timeout)

    def close(self) -> None:
        if self._conn is not None:
            self._conn.flush(1.0)
            self._conn.close()
