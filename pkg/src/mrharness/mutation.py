"""Mutation analysis: single-operator mutants of a job, each run through the
full harness test case, classified against the base job's output."""

from __future__ import annotations

import copy
import json
import queue
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from mrharness.coordinator import Outcome
from mrharness.harness import HarnessRun
from mrharness.jobs import expr as ex
from mrharness.jobs.registry import JobDefinition, apply_mutation, get_job
from mrharness.model import Instruction, Opcode, TestCase

SUBSTRATE_NOTE = (
    "Mutants are single operator substitutions on the job's expression trees "
    "(arithmetic, relational and logical operators, each within its own class); "
    "counts are not comparable with bytecode-level mutation."
)

RESULT_WIDTH = 24


@dataclass(frozen=True)
class Mutant:
    id: str
    job: str
    section: str
    path: tuple[int, ...]
    original: str
    replacement: str

    def mutation(self) -> dict[str, Any]:
        return {"section": self.section, "path": list(self.path), "op": self.replacement}

    @property
    def site(self) -> str:
        return f"{self.section}@{'.'.join(map(str, self.path)) or 'root'}: {self.original} -> {self.replacement}"


def generate_mutants(job: JobDefinition | str) -> list[Mutant]:
    """One mutant per (operator site, legal same-class replacement), in
    pre-order over map, reduce and finalize bodies. Replacements that would
    not type-check are skipped."""
    if isinstance(job, str):
        job = get_job(job)
    mutants: list[Mutant] = []
    for section, body in job.sections():
        for path, node in ex.walk(body):
            if not isinstance(node, ex.Binary):
                continue
            for op in ex.operator_class(node.op):
                if op == node.op:
                    continue
                candidate = Mutant(f"M{len(mutants)}", job.name, section, path, node.op, op)
                mutated = apply_mutation(job, candidate.mutation())
                if ex.well_typed(mutated.bodies[section], job.envs[section]):
                    mutants.append(candidate)
    return mutants


def load_mutants(path: str | Path) -> tuple[str, list[Mutant], dict[str, str]]:
    """Hand-written mutants: (job, mutants, id -> category)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    job = get_job(doc["job"])
    mutants, categories = [], {}
    for entry in doc["mutants"]:
        path_ = tuple(entry["path"])
        node = ex.node_at(job.bodies[entry["section"]], path_)
        if not isinstance(node, ex.Binary):
            raise ValueError(f"{entry['id']}: no operator at {entry['section']}@{path_}")
        m = Mutant(entry["id"], job.name, entry["section"], path_, node.op, entry["op"])
        apply_mutation(job, m.mutation())  # rejects cross-class swaps
        mutants.append(m)
        categories[m.id] = entry.get("category", "")
    return job.name, mutants, categories


def operator_diff(a: ex.Expr, b: ex.Expr) -> list[tuple[tuple[int, ...], str, str]]:
    """Positions where two same-shaped trees differ; non-operator
    differences are reported with op names "<shape>"."""
    diffs: list[tuple[tuple[int, ...], str, str]] = []

    def rec(x: ex.Expr, y: ex.Expr, path: tuple[int, ...]) -> None:
        if isinstance(x, ex.Binary) and isinstance(y, ex.Binary):
            if x.op != y.op:
                diffs.append((path, x.op, y.op))
        elif type(x) is not type(y) or (not ex.children(x) and x != y):
            diffs.append((path, "<shape>", "<shape>"))
            return
        kx, ky = ex.children(x), ex.children(y)
        if len(kx) != len(ky):
            diffs.append((path, "<shape>", "<shape>"))
            return
        for i, (cx, cy) in enumerate(zip(kx, ky)):
            rec(cx, cy, path + (i,))

    rec(a, b, ())
    return diffs


# -- running ---------------------------------------------------------------------


class BaseJobFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class KillRow:
    mutant: Mutant
    output: str | None  # canonical observed output; "null" is NULL, None is "nothing observed"
    verdict: Outcome
    classification: str  # "killed" | "equivalent"

    @property
    def consistent(self) -> bool:
        return (self.verdict is Outcome.FAIL) == (self.classification == "killed") and \
            self.verdict is not Outcome.INCONCLUSIVE

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.mutant.id,
            "output": None if self.output is None else json.loads(self.output),
            "verdict": self.verdict.value,
            "classification": self.classification,
            "site": self.mutant.site,
        }


@dataclass
class KillMatrix:
    job: str
    base_output: str
    rows: list[KillRow] = field(default_factory=list)

    def inconsistent(self) -> list[KillRow]:
        return [r for r in self.rows if not r.consistent]

    def to_json(self) -> list[dict[str, Any]]:
        return [r.to_json() for r in self.rows]


def substitute(tc: TestCase, job: str, mutation: dict[str, Any] | None) -> TestCase:
    """Copy of `tc` whose SEND_JOB instructions for `job` carry `mutation`."""
    actions = []
    for a in tc.actions:
        instructions = []
        for ins in a.instructions:
            if ins.opcode is Opcode.SEND_JOB and ins.args.get("job") == job:
                args = copy.deepcopy(dict(ins.args))
                job_args = dict(args.get("args", {}))
                job_args.pop("mutant", None)
                if mutation is not None:
                    job_args["mutant"] = mutation
                args["args"] = job_args
                ins = Instruction(ins.opcode, args)
            instructions.append(ins)
        actions.append(type(a)(a.id, a.targets, tuple(instructions), a.timeout_ms, a.level))
    return TestCase(tc.name, tc.testers, tuple(actions), tc.roles)


def _job_actions(tc: TestCase, job: str) -> set[str]:
    return {
        a.id for a in tc.actions
        for ins in a.instructions
        if ins.opcode is Opcode.SEND_JOB and ins.args.get("job") == job
    }


def observed_output(run: HarnessRun, action_ids: Iterable[str]) -> str | None:
    ids = set(action_ids)
    for v in run.verdict.log.entries:
        if v.action_id in ids and v.observed is not None:
            return v.observed
    return None


Runner = Callable[[TestCase], HarnessRun]


def run_mutation_analysis(
    job: str,
    tc: TestCase,
    runner: Runner | Sequence[Runner],
    mutants: list[Mutant] | None = None,
    progress: Callable[[KillRow], None] | None = None,
) -> KillMatrix:
    """Run `tc` once per mutant. Given several runners (each owning its own
    ports), mutants run concurrently, one in flight per runner; rows keep
    mutant order either way."""
    runners = [runner] if callable(runner) else list(runner)
    if not runners:
        raise ValueError("no runner")
    job_actions = _job_actions(tc, job)
    if not job_actions:
        raise BaseJobFailed(f"test case {tc.name!r} never sends job {job!r}")
    base = runners[0](substitute(tc, job, None))
    base_output = observed_output(base, job_actions)
    if base.verdict.outcome is not Outcome.PASS or base_output is None:
        failing = [v for v in base.verdict.log.entries if v.outcome is not Outcome.PASS]
        detail = "; ".join(f"{v.action_id}@{v.tester}: {v.outcome.value} {v.detail}" for v in failing)
        raise BaseJobFailed(f"base job does not pass its own test case ({detail or 'no output observed'})")

    free: queue.Queue[Runner] = queue.Queue()
    for r in runners:
        free.put(r)

    def one(m: Mutant) -> KillRow:
        r = free.get()
        try:
            run = r(substitute(tc, job, m.mutation()))
        finally:
            free.put(r)
        output = observed_output(run, job_actions)
        classification = "equivalent" if output == base_output else "killed"
        row = KillRow(m, output, run.verdict.outcome, classification)
        if progress is not None:
            progress(row)
        return row

    todo = mutants if mutants is not None else generate_mutants(job)
    matrix = KillMatrix(job, base_output)
    if len(runners) == 1:
        matrix.rows = [one(m) for m in todo]
    else:
        with ThreadPoolExecutor(max_workers=len(runners)) as pool:
            matrix.rows = list(pool.map(one, todo))
    return matrix


# -- reporting ---------------------------------------------------------------------


def display_output(output: Any) -> str:
    """Result column text: NULL, 4-decimal numbers, or compact JSON."""
    if isinstance(output, str):
        try:
            output = json.loads(output)
        except json.JSONDecodeError:
            return output
    if output is None:
        return "NULL"
    if isinstance(output, float):
        from mrharness.tester import round4

        return str(round4(output))
    text = json.dumps(output, sort_keys=True, separators=(",", ":"))
    return text if len(text) <= RESULT_WIDTH else text[:RESULT_WIDTH - 3] + "..."


def summarize(rows: list[dict[str, Any]]) -> dict[str, Any]:
    total = len(rows)
    killed = sum(1 for r in rows if r["classification"] == "killed")
    equivalent = total - killed
    detected = sum(1 for r in rows if r["classification"] == "killed" and r["verdict"] == "fail")
    ratio = None if killed == 0 else detected / killed
    return {
        "total": total,
        "killed": killed,
        "equivalent": equivalent,
        "detected": detected,
        "kill_ratio": ratio,
        "kill_ratio_text": "n/a" if ratio is None else f"{ratio:.0%}",
        "inconsistent": [r["id"] for r in rows
                         if (r["verdict"] == "fail") != (r["classification"] == "killed")
                         or r["verdict"] == "inconclusive"],
    }


def report(matrix: KillMatrix | list[dict[str, Any]], base_output: str | None = None) -> tuple[str, dict[str, Any]]:
    """Human table (mutant, result, pass, fail, site) plus a JSON summary."""
    if isinstance(matrix, KillMatrix):
        rows, base_output = matrix.to_json(), matrix.base_output
    else:
        rows = list(matrix)
    summary = summarize(rows)
    lines = []
    if base_output is not None:
        lines.append(f"original output: {display_output(base_output)}")
    header = f"{'Mutant':<7} {'Result':<{RESULT_WIDTH}} {'Pass':^4} {'Fail':^4}  Site"
    lines += [header, "-" * len(header)]
    for r in rows:
        pass_mark = "X" if r["verdict"] == "pass" else ""
        fail_mark = "X" if r["verdict"] == "fail" else ("?" if r["verdict"] == "inconclusive" else "")
        lines.append(f"{r['id']:<7} {display_output(r['output']):<{RESULT_WIDTH}} {pass_mark:^4} {fail_mark:^4}  {r.get('site', '')}")
    lines.append("")
    lines.append(
        f"total {summary['total']}, killed {summary['killed']}, equivalent {summary['equivalent']}; "
        f"kill ratio over non-equivalent mutants: {summary['kill_ratio_text']}"
    )
    if summary["inconsistent"]:
        lines.append(f"verdict/classification mismatch: {', '.join(summary['inconsistent'])}")
    lines.append(SUBSTRATE_NOTE)
    machine = {"summary": summary, "base_output": None if base_output is None else json.loads(base_output),
               "rows": rows}
    return "\n".join(lines), machine
