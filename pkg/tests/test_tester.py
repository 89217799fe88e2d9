from decimal import Decimal

import psutil
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrharness.coordinator import Outcome
from mrharness.harness import free_port
from mrharness.model import Instruction, Opcode, Role
from mrharness.tester import ABSENT, Tester, TesterConfig, compare, round4


@pytest.mark.parametrize("value, text", [
    (3.141624, "3.1416"),
    (3.14155, "3.1416"),  # half-up on the shortest repr
    (2.00005, "2.0001"),
    (3.143112, "3.1431"),
    (4, "4.0000"),
    (-0.00005, "-0.0001"),
])
def test_round4_half_up(value, text):
    assert round4(value) == Decimal(text)


@pytest.mark.parametrize("observed, expected, mode, tol, outcome", [
    (3.141624, 3.1416, "round4", None, "pass"),
    (3.143112, 3.1416, "round4", None, "fail"),
    (None, 3.1416, "round4", None, "fail"),
    (ABSENT, 3.1416, "round4", None, "inconclusive"),
    ({"a": 1, "b": 2}, {"b": 2, "a": 1}, "exact", None, "pass"),
    ({"a": 1}, {"a": 2}, "exact", None, "fail"),
    (None, None, "exact", None, "pass"),
    (3.15, 3.14, "abs_tol", 0.02, "pass"),
    (3.2, 3.14, "abs_tol", 0.02, "fail"),
    ("3.14", 3.14, "round4", None, "fail"),
])
def test_compare(observed, expected, mode, tol, outcome):
    assert compare(observed, expected, mode, tol)[0] is Outcome(outcome)


@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_round4_self_consistent(x):
    assert compare(x, x, "round4")[0] is Outcome.PASS
    assert compare(x, x, "abs_tol", 0)[0] is Outcome.PASS


def ins(op, **args):
    return Instruction(Opcode(op), args)


PI_JOB = {"job": "pi", "args": {"maps": 4, "points_per_map": 5000, "seed": 7}}


def run(tester, action, *instructions, timeout_ms=10_000):
    return tester.execute(action, list(instructions), timeout_ms)


@pytest.mark.parametrize("spawn", ["thread", "process"])
def test_master_and_worker_lifecycle(spawn, tmp_path):
    cfg = TesterConfig(mr_port=free_port(), heartbeat_ms=100, spawn=spawn, work_dir=str(tmp_path))
    master = Tester("t0", Role.MASTER, cfg)
    worker = Tester("t1", Role.WORKER, TesterConfig(cfg.mr_host, cfg.mr_port, 100, spawn, str(tmp_path)))
    try:
        assert run(master, "a0", ins("START_MASTER")).outcome is Outcome.PASS
        assert run(worker, "a1", ins("START_WORKERS", count=2)).outcome is Outcome.PASS
        v = run(master, "a2", ins("SEND_JOB", **PI_JOB))
        assert v.outcome is Outcome.PASS and v.observed is not None
        v = run(master, "a3", ins("ASSERT_OUTPUT", expected=float(v.observed), mode="exact"))
        assert v.outcome is Outcome.PASS
        dropped = run(worker, "a4", ins("DROP_WORKER"))
        assert dropped.outcome is Outcome.PASS and len(worker.workers) == 1
        assert run(worker, "a5", ins("STOP_WORKERS")).outcome is Outcome.PASS
        assert run(worker, "a6", ins("STOP_WORKERS")).detail == "already stopped"
        assert run(master, "a7", ins("STOP_MASTER")).outcome is Outcome.PASS
        assert run(master, "a8", ins("STOP_MASTER")).detail == "already stopped"
    finally:
        master.cleanup()
        worker.cleanup()
    if spawn == "process":
        assert not [p for p in psutil.Process().children(recursive=True) if p.is_running()
                    and p.status() != psutil.STATUS_ZOMBIE]


def test_wrong_role_fails():
    t = Tester("t1", Role.WORKER, TesterConfig(spawn="thread"))
    v = run(t, "a0", ins("START_MASTER"))
    assert v.outcome is Outcome.FAIL and "master-controller" in v.detail


def test_send_job_without_master_fails():
    t = Tester("t0", Role.MASTER, TesterConfig(spawn="thread"))
    assert run(t, "a0", ins("SEND_JOB", **PI_JOB)).outcome is Outcome.FAIL


def test_assert_before_any_job_is_inconclusive():
    t = Tester("t0", Role.MASTER, TesterConfig(spawn="thread"))
    assert run(t, "a0", ins("ASSERT_OUTPUT", expected=1, mode="exact")).outcome is Outcome.INCONCLUSIVE


def test_drop_without_worker_fails():
    t = Tester("t1", Role.WORKER, TesterConfig(spawn="thread"))
    assert run(t, "a0", ins("DROP_WORKER")).outcome is Outcome.FAIL


def test_master_port_in_use_fails():
    import socket
    with socket.create_server(("127.0.0.1", 0)) as busy:
        cfg = TesterConfig(mr_port=busy.getsockname()[1], spawn="thread")
        v = run(Tester("t0", Role.MASTER, cfg), "a0", ins("START_MASTER"))
    assert v.outcome is Outcome.FAIL and "cannot bind" in v.detail


def test_job_slower_than_timeout_is_inconclusive(tmp_path):
    cfg = TesterConfig(mr_port=free_port(), spawn="thread", work_dir=str(tmp_path))
    t = Tester("t0", Role.MASTER, cfg)
    try:
        run(t, "a0", ins("START_MASTER"))
        # no workers: the job cannot finish before the action's budget
        v = run(t, "a1", ins("SEND_JOB", **PI_JOB), timeout_ms=200)
        assert v.outcome is Outcome.INCONCLUSIVE
    finally:
        t.cleanup()


def test_null_job_output_is_observed_and_fails_assert(tmp_path):
    cfg = TesterConfig(mr_port=free_port(), heartbeat_ms=50, spawn="thread", work_dir=str(tmp_path))
    m, w = Tester("t0", Role.MASTER, cfg), Tester("t1", Role.WORKER, cfg)
    job = {"job": "pi", "args": {**PI_JOB["args"], "mutant": {"section": "reduce", "path": [1, 2], "op": "*"}}}
    try:
        run(m, "a0", ins("START_MASTER"))
        run(w, "a1", ins("START_WORKERS"))
        v = run(m, "a2", ins("SEND_JOB", **job))
        assert (v.outcome, v.observed) == (Outcome.PASS, "null")
        assert run(m, "a3", ins("ASSERT_OUTPUT", expected=3.1416, mode="round4")).outcome is Outcome.FAIL
    finally:
        m.cleanup()
        w.cleanup()
