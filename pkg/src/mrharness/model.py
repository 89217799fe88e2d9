"""Test-case data model, validation and schedule construction."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping


class Role(str, Enum):
    MASTER = "master"
    WORKER = "worker"


class Opcode(str, Enum):
    START_MASTER = "START_MASTER"
    START_WORKERS = "START_WORKERS"
    SEND_JOB = "SEND_JOB"
    DROP_WORKER = "DROP_WORKER"
    ASSERT_OUTPUT = "ASSERT_OUTPUT"
    STOP_WORKERS = "STOP_WORKERS"
    STOP_MASTER = "STOP_MASTER"
    SLEEP = "SLEEP"


ASSERT_MODES = ("exact", "round4", "abs_tol")

# opcode -> (required arg names, optional arg names)
ARG_SCHEMA: dict[Opcode, tuple[frozenset[str], frozenset[str]]] = {
    Opcode.START_MASTER: (frozenset(), frozenset()),
    Opcode.START_WORKERS: (frozenset(), frozenset({"count"})),
    Opcode.SEND_JOB: (frozenset({"job", "args"}), frozenset()),
    Opcode.DROP_WORKER: (frozenset(), frozenset()),
    Opcode.ASSERT_OUTPUT: (frozenset({"expected", "mode"}), frozenset({"tol"})),
    Opcode.STOP_WORKERS: (frozenset(), frozenset()),
    Opcode.STOP_MASTER: (frozenset(), frozenset()),
    Opcode.SLEEP: (frozenset({"ms"}), frozenset()),
}

# opcodes that only make sense on one kind of controller
ROLE_OF_OPCODE: dict[Opcode, Role] = {
    Opcode.START_MASTER: Role.MASTER,
    Opcode.SEND_JOB: Role.MASTER,
    Opcode.STOP_MASTER: Role.MASTER,
    Opcode.START_WORKERS: Role.WORKER,
    Opcode.DROP_WORKER: Role.WORKER,
    Opcode.STOP_WORKERS: Role.WORKER,
}

_TESTER_RE = re.compile(r"^t(0|[1-9][0-9]*)$")


class InvalidTestCase(ValueError):
    """Raised when a test case is used before passing validation."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


@dataclass(frozen=True, order=True)
class TesterId:
    index: int

    __test__ = False

    @classmethod
    def parse(cls, text: str) -> "TesterId":
        m = _TESTER_RE.match(text)
        if not m:
            raise ValueError(f"bad tester id {text!r}")
        return cls(int(m.group(1)))

    def __str__(self) -> str:
        return f"t{self.index}"


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    args: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"op": self.opcode.value, "args": dict(self.args)}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Instruction":
        return cls(Opcode(obj["op"]), dict(obj.get("args", {})))


def instruction_errors(ins: Instruction) -> list[str]:
    """Per-opcode argument checks; shared by validation and the tester."""
    required, optional = ARG_SCHEMA[ins.opcode]
    args = ins.args
    name = ins.opcode.value
    errors = [f"{name} missing arg {k!r}" for k in sorted(required - set(args))]
    errors += [f"{name} unexpected arg {k!r}" for k in sorted(set(args) - required - optional)]
    if errors:
        return errors
    if ins.opcode is Opcode.START_WORKERS and "count" in args:
        if not _is_int(args["count"]) or args["count"] < 1:
            errors.append(f"{name} count must be a positive integer")
    elif ins.opcode is Opcode.SEND_JOB:
        if not isinstance(args["job"], str):
            errors.append(f"{name} job must be a string")
        if not isinstance(args["args"], Mapping):
            errors.append(f"{name} args must be an object")
    elif ins.opcode is Opcode.ASSERT_OUTPUT:
        mode = args["mode"]
        if mode not in ASSERT_MODES:
            errors.append(f"{name} unknown mode {mode!r}")
        elif mode == "abs_tol":
            tol = args.get("tol")
            if not _is_number(tol) or tol < 0:
                errors.append(f"{name} abs_tol needs a non-negative numeric tol")
        elif "tol" in args:
            errors.append(f"{name} tol only allowed with mode abs_tol")
    elif ins.opcode is Opcode.SLEEP:
        if not _is_int(args["ms"]) or args["ms"] < 0:
            errors.append(f"{name} ms must be a non-negative integer")
    return errors


@dataclass(frozen=True)
class Action:
    id: str
    targets: frozenset[TesterId]
    instructions: tuple[Instruction, ...]
    timeout_ms: int
    level: int

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "level": self.level,
            "targets": [str(t) for t in sorted(self.targets)],
            "timeout_ms": self.timeout_ms,
            "instructions": [i.to_json() for i in self.instructions],
        }


@dataclass(frozen=True)
class TestCase:
    name: str
    testers: frozenset[TesterId]
    actions: tuple[Action, ...]
    roles: Mapping[TesterId, Role]

    __test__ = False  # keep pytest from collecting this class

    @property
    def master(self) -> TesterId | None:
        masters = [t for t, r in self.roles.items() if r is Role.MASTER]
        return masters[0] if len(masters) == 1 else None

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "testers": [
                {"id": str(t), "role": self.roles[t].value} for t in sorted(self.testers)
            ],
            "actions": [a.to_json() for a in self.actions],
        }

    def actions_for(self, tester: TesterId) -> list[Action]:
        return [a for a in self.actions if tester in a.targets]


@dataclass(frozen=True)
class Schedule:
    entries: Mapping[str, frozenset[TesterId]]
    levels: tuple[tuple[int, tuple[Action, ...]], ...]

    def actions(self) -> list[Action]:
        return [a for _, group in self.levels for a in group]


def validate(tc: TestCase) -> list[str]:
    """Return every violated invariant; empty means the case is runnable."""
    errors: list[str] = []
    if not tc.testers:
        errors.append("testers empty")
    if not tc.actions:
        errors.append("actions empty")

    for t in sorted(tc.testers):
        if t not in tc.roles:
            errors.append(f"tester {t} has no role")
    for t in sorted(set(tc.roles) - set(tc.testers)):
        errors.append(f"role given for unknown tester {t}")
    masters = sorted(t for t, r in tc.roles.items() if r is Role.MASTER)
    if tc.testers and len(masters) != 1:
        errors.append(f"expected exactly one master-controller, found {len(masters)}")

    seen: set[str] = set()
    for a in tc.actions:
        if not a.id:
            errors.append("action with empty id")
        elif a.id in seen:
            errors.append(f"duplicate action id {a.id}")
        seen.add(a.id)
        if not a.targets:
            errors.append(f"targets empty in {a.id}")
        for t in sorted(a.targets - tc.testers):
            errors.append(f"unknown tester {t} in {a.id}")
        if not a.instructions:
            errors.append(f"instructions empty in {a.id}")
        if not _is_int(a.timeout_ms) or a.timeout_ms <= 0:
            errors.append(f"timeout_ms must be positive in {a.id}")
        if not _is_int(a.level) or a.level < 0:
            errors.append(f"level must be a non-negative integer in {a.id}")
        for ins in a.instructions:
            errors += [f"{e} in {a.id}" for e in instruction_errors(ins)]
            need = ROLE_OF_OPCODE.get(ins.opcode)
            if need is None:
                continue
            for t in sorted(a.targets & tc.testers):
                role = tc.roles.get(t)
                if role is not None and role is not need:
                    errors.append(
                        f"{ins.opcode.value} needs a {need.value}-controller but {t} is {role.value} in {a.id}"
                    )

    levels = sorted({a.level for a in tc.actions if _is_int(a.level) and a.level >= 0})
    if levels and levels != list(range(len(levels))):
        missing = sorted(set(range(levels[-1] + 1)) - set(levels))
        errors.append(f"levels not contiguous from 0: missing {missing}")
    return errors


def build_schedule(tc: TestCase) -> Schedule:
    errors = validate(tc)
    if errors:
        raise InvalidTestCase(errors)
    by_level: dict[int, list[Action]] = {}
    for a in tc.actions:
        by_level.setdefault(a.level, []).append(a)
    levels = tuple((lvl, tuple(by_level[lvl])) for lvl in sorted(by_level))
    entries = {a.id: a.targets for a in tc.actions}
    return Schedule(entries=entries, levels=levels)


# -- file format ------------------------------------------------------------

_TOP_KEYS = {"name", "testers", "actions"}
_TESTER_KEYS = {"id", "role"}
_ACTION_KEYS = {"id", "level", "targets", "timeout_ms", "instructions"}
_INSTRUCTION_KEYS = {"op", "args"}


class TestCaseFormatError(ValueError):
    __test__ = False


def _check_keys(obj: Any, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise TestCaseFormatError(f"{where}: expected an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise TestCaseFormatError(f"{where}: unknown keys {unknown}")
    missing = sorted(allowed - set(obj) - {"args"})
    if missing:
        raise TestCaseFormatError(f"{where}: missing keys {missing}")


def testcase_from_json(doc: Any) -> TestCase:
    """Parse the on-disk JSON document. Structural problems raise; semantic
    ones are left for `validate`."""
    _check_keys(doc, _TOP_KEYS, "test case")
    if not isinstance(doc["name"], str):
        raise TestCaseFormatError("name must be a string")
    if not isinstance(doc["testers"], list) or not isinstance(doc["actions"], list):
        raise TestCaseFormatError("testers and actions must be arrays")
    testers: set[TesterId] = set()
    roles: dict[TesterId, Role] = {}
    for i, entry in enumerate(doc["testers"]):
        _check_keys(entry, _TESTER_KEYS, f"testers[{i}]")
        try:
            tid = TesterId.parse(entry["id"])
            role = Role(entry["role"])
        except (TypeError, ValueError) as exc:
            raise TestCaseFormatError(f"testers[{i}]: {exc}") from None
        if tid in testers:
            raise TestCaseFormatError(f"testers[{i}]: duplicate tester {tid}")
        testers.add(tid)
        roles[tid] = role
    actions = []
    for i, entry in enumerate(doc["actions"]):
        where = f"actions[{i}]"
        _check_keys(entry, _ACTION_KEYS, where)
        if not isinstance(entry["targets"], list) or not isinstance(entry["instructions"], list):
            raise TestCaseFormatError(f"{where}: targets and instructions must be arrays")
        try:
            targets = frozenset(TesterId.parse(t) for t in entry["targets"])
        except (TypeError, ValueError) as exc:
            raise TestCaseFormatError(f"{where}: {exc}") from None
        instructions = []
        for j, ins in enumerate(entry["instructions"]):
            _check_keys(ins, _INSTRUCTION_KEYS, f"{where}.instructions[{j}]")
            try:
                instructions.append(Instruction.from_json(ins))
            except ValueError as exc:
                raise TestCaseFormatError(f"{where}.instructions[{j}]: {exc}") from None
        actions.append(
            Action(
                id=str(entry["id"]),
                targets=targets,
                instructions=tuple(instructions),
                timeout_ms=entry["timeout_ms"],
                level=entry["level"],
            )
        )
    return TestCase(doc["name"], frozenset(testers), tuple(actions), roles)


testcase_from_json.__test__ = False  # type: ignore[attr-defined]


def load_testcase(path: str | Path) -> TestCase:
    with open(path, encoding="utf-8") as fh:
        return testcase_from_json(json.load(fh))
