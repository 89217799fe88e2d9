import queue
import socket
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrharness.transport import MessageKind
from mrharness.transport.base import PeerJoined, PeerLost, PeerUnreachable
from mrharness.transport.real import CoordinatorServer, TesterLink
from mrharness.transport.sim import SimConfig, SimNetwork, SimSession
from mrharness.transport.wire import (
    FramingError,
    Message,
    decode_frame,
    decode_message,
    encode_frame,
    encode_message,
    parse_endpoint,
)

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-2**53, 2**53) | st.floats(allow_nan=False, allow_infinity=False)
    | st.text(max_size=20),
    lambda kids: st.lists(kids, max_size=4) | st.dictionaries(st.text(max_size=8), kids, max_size=4),
    max_leaves=10,
)
messages = st.builds(
    Message,
    st.sampled_from(list(MessageKind)),
    st.text(min_size=1, max_size=8),
    st.text(min_size=1, max_size=8),
    st.integers(0, 2**31),
    st.dictionaries(st.text(max_size=8), json_values, max_size=4),
)


@settings(max_examples=200)
@given(messages)
def test_message_frame_round_trip(msg):
    data = encode_message(msg)
    assert int.from_bytes(data[:4], "big") == len(data) - 4
    assert decode_message(data) == msg


def test_frames_concatenate():
    data = encode_frame({"a": 1}) + encode_frame([2])
    first, rest = decode_frame(data)
    second, rest = decode_frame(rest)
    assert (first, second, rest) == ({"a": 1}, [2], b"")


@pytest.mark.parametrize("data", [b"\x00\x00", b"\x00\x00\x00\x05abc", b"\x00\x00\x00\x02{x", b"\xff\xff\xff\xff"])
def test_bad_frames(data):
    with pytest.raises(FramingError):
        decode_frame(data)


def test_message_shape_is_strict():
    with pytest.raises(FramingError):
        decode_message(encode_frame({"kind": "PING", "sender": "t0", "recipient": "c", "seq": 1}))
    with pytest.raises(FramingError):
        decode_message(encode_frame({"kind": "HELLO", "sender": "t0", "recipient": "c", "seq": 1, "payload": {}}))


def test_parse_endpoint():
    assert parse_endpoint("10.0.0.2:7717") == ("10.0.0.2", 7717)
    assert parse_endpoint(":7800") == ("127.0.0.1", 7800)


# -- simulator --------------------------------------------------------------------


def _net(**kw):
    net = SimNetwork(SimConfig(**kw))
    got = []
    net.attach("b", lambda m: got.append((net.clock, m.seq)))
    return net, got


def _msg(seq, sender="a", recipient="b"):
    return Message(MessageKind.PING, sender, recipient, seq, {})


def test_fixed_latency_delivery_time():
    net, got = _net(latency_ms=7)
    net.send(_msg(1))
    net.sim_advance(6)
    assert got == []
    net.sim_advance(7)
    assert got == [(7, 1)]


def test_stream_is_fifo_under_random_latency():
    net, got = _net(latency_ms=(1, 50), rng_seed=3)
    for i in range(200):
        net.send(_msg(i))
    net.sim_advance(10_000)
    assert [s for _, s in got] == list(range(200))


def test_drop_probability_one_drops_everything():
    net, got = _net(drop_probability=1.0)
    for i in range(10):
        net.send(_msg(i))
    net.sim_advance(100)
    assert got == []
    assert sum(e.event == "drop" for e in net.trace) == 10


def test_same_seed_same_trace():
    def trace(seed):
        net, got = _net(latency_ms=(1, 30), drop_probability=0.2, rng_seed=seed)
        for i in range(100):
            net.send(_msg(i))
        net.sim_advance(1000)
        return got
    assert trace(5) == trace(5)
    assert trace(5) != trace(6)


def test_per_link_latency():
    net, got = _net(latency_ms=1, link_latency={("a", "b"): 40})
    net.send(_msg(1))
    net.send(_msg(2, sender="c"))
    net.sim_advance(100)
    assert got == [(1, 2), (40, 1)]


def test_session_poll_advances_clock_to_deadline():
    net = SimNetwork()
    session = SimSession(net)
    assert session.poll(25) is None
    assert session.now_ms() == 25


def test_crash_reports_peer_lost_and_unreachable():
    net = SimNetwork()
    session = SimSession(net)
    net.attach("t0", lambda m: None)
    net.crash("t0")
    assert isinstance(session.poll(10), PeerLost)
    with pytest.raises(PeerUnreachable):
        session.post(MessageKind.EXECUTE, "t0", {})


# -- TCP ---------------------------------------------------------------------------


def _poll_until(session, pred, timeout=5.0):
    end = session.now_ms() + timeout * 1000
    while session.now_ms() < end:
        ev = session.poll(end)
        if ev is not None and pred(ev):
            return ev
    raise AssertionError("event not seen")


def test_tcp_identify_exchange_and_loss():
    server = CoordinatorServer("127.0.0.1", 0)
    try:
        link = TesterLink("t3", ("127.0.0.1", server.port))
        link.connect(2.0)
        _poll_until(server, lambda e: isinstance(e, PeerJoined) and e.peer == "t3")
        assert link.recv(2.0).kind is MessageKind.PONG
        assert server.connected() == {"t3"}
        server.post(MessageKind.EXECUTE, "t3", {"action_id": "a0"})
        msg = link.recv(2.0)
        assert (msg.kind, msg.payload) == (MessageKind.EXECUTE, {"action_id": "a0"})
        link.post(MessageKind.VERDICT, "coordinator", {"ok": True})
        got = _poll_until(server, lambda e: isinstance(e, Message))
        assert (got.sender, got.payload) == ("t3", {"ok": True})
        link.close()
        _poll_until(server, lambda e: isinstance(e, PeerLost) and e.peer == "t3")
        assert server.connected() == set()
    finally:
        server.close()


def test_tcp_unidentified_connection_is_dropped():
    server = CoordinatorServer("127.0.0.1", 0)
    try:
        with socket.create_connection(("127.0.0.1", server.port)) as s:
            s.sendall(encode_message(Message(MessageKind.VERDICT, "x", "coordinator", 1, {})))
            s.settimeout(2.0)
            assert s.recv(10) == b""
        assert server.connected() == set()
    finally:
        server.close()


def test_tester_link_gives_up_on_dead_endpoint():
    from mrharness.transport.base import TransportError
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    link = TesterLink("t0", ("127.0.0.1", port))
    start = time.monotonic()
    with pytest.raises(TransportError):
        link.connect(0.3)
    assert time.monotonic() - start < 3
