import json

import pytest

from mrharness.model import (
    Action,
    Instruction,
    InvalidTestCase,
    Opcode,
    Role,
    TestCase,
    TestCaseFormatError,
    TesterId,
    build_schedule,
    instruction_errors,
    testcase_from_json,
    validate,
)

from conftest import fixture_path


def case_json(**overrides):
    obj = {
        "name": "mini",
        "testers": [{"id": "t0", "role": "master"}, {"id": "t1", "role": "worker"}],
        "actions": [
            {"id": "a0", "level": 0, "targets": ["t0"], "timeout_ms": 100,
             "instructions": [{"op": "START_MASTER", "args": {}}]},
            {"id": "a1", "level": 1, "targets": ["t1"], "timeout_ms": 100,
             "instructions": [{"op": "START_WORKERS", "args": {"count": 2}}]},
        ],
    }
    obj.update(overrides)
    return obj


def test_tester_id_round_trip():
    assert str(TesterId.parse("t12")) == "t12"
    assert TesterId.parse("t3") < TesterId.parse("t10")
    with pytest.raises(ValueError):
        TesterId.parse("x1")


def test_bundled_fixtures_validate():
    for name in ("table1_pi.json", "table1_wordcount.json"):
        tc = testcase_from_json(json.loads(fixture_path(name).read_text()))
        assert validate(tc) == []
        sched = build_schedule(tc)
        assert [lvl for lvl, _ in sched.levels] == [0, 1, 2, 3, 4, 5]
        assert sorted(a.id for _, g in sched.levels[2:3] for a in g) == ["a2", "a3"]


def test_schedule_entries_cover_every_target(table1_pi):
    sched = build_schedule(table1_pi)
    assert sum(len(t) for t in sched.entries.values()) == 14
    assert {a.id for a in sched.actions()} == {a.id for a in table1_pi.actions}


def test_json_round_trip(table1_pi):
    assert testcase_from_json(table1_pi.to_json()) == table1_pi


@pytest.mark.parametrize("mutate, message", [
    (lambda o: o.update(testers=[]), "testers empty"),
    (lambda o: o["actions"][1].update(targets=["t9"]), "unknown tester t9 in a1"),
    (lambda o: o["actions"][1].update(level=2), "levels not contiguous from 0"),
    (lambda o: o["actions"][1].update(id="a0"), "duplicate action id a0"),
    (lambda o: o["actions"][0].update(timeout_ms=0), "timeout_ms must be positive in a0"),
    (lambda o: o["actions"][1].update(targets=["t0"]), "START_WORKERS needs a worker-controller"),
    (lambda o: o["testers"][1].update(role="master"), "expected exactly one master-controller"),
])
def test_validation_errors(mutate, message):
    obj = case_json()
    mutate(obj)
    try:
        tc = testcase_from_json(obj)
    except TestCaseFormatError as exc:
        assert message in str(exc)
        return
    errors = validate(tc)
    assert any(message in e for e in errors), errors
    with pytest.raises(InvalidTestCase):
        build_schedule(tc)


def test_unknown_keys_rejected():
    obj = case_json()
    obj["actions"][0]["retries"] = 3
    with pytest.raises(TestCaseFormatError):
        testcase_from_json(obj)


def test_unknown_opcode_rejected():
    obj = case_json()
    obj["actions"][0]["instructions"][0]["op"] = "REBOOT"
    with pytest.raises(TestCaseFormatError):
        testcase_from_json(obj)


@pytest.mark.parametrize("args, ok", [
    ({"expected": 3.1416, "mode": "round4"}, True),
    ({"expected": 1, "mode": "abs_tol", "tol": 0.1}, True),
    ({"expected": 1, "mode": "abs_tol"}, False),
    ({"expected": 1, "mode": "fuzzy"}, False),
    ({"mode": "exact"}, False),
])
def test_assert_args_schema(args, ok):
    assert (instruction_errors(Instruction(Opcode.ASSERT_OUTPUT, args)) == []) is ok


def test_start_workers_count_must_be_positive():
    assert instruction_errors(Instruction(Opcode.START_WORKERS, {"count": 0}))
    assert not instruction_errors(Instruction(Opcode.START_WORKERS, {"count": 1}))


def test_actions_for():
    tc = testcase_from_json(case_json())
    assert [a.id for a in tc.actions_for(TesterId(1))] == ["a1"]
    assert tc.master == TesterId(0)
    assert tc.roles[TesterId(1)] is Role.WORKER
