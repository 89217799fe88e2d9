import json

import pytest

from mrharness.coordinator import Outcome
from mrharness.harness import HarnessConfig, run_case
from mrharness.jobs import expr as ex
from mrharness.jobs.registry import JobDefinition, apply_mutation, get_job
from mrharness.mutation import (
    BaseJobFailed,
    KillMatrix,
    Mutant,
    generate_mutants,
    load_mutants,
    operator_diff,
    report,
    run_mutation_analysis,
    substitute,
    summarize,
)

from conftest import fixture_path


def hand_count(job):
    """Operator sites times (class size - 1); every same-class swap in the
    bundled bodies type-checks."""
    return sum(
        len(ex.operator_class(node.op)) - 1
        for _, body in job.sections()
        for _, node in ex.walk(body)
        if isinstance(node, ex.Binary)
    )


def test_mutant_counts():
    # pi: map has and, >, >=, <= and eight arithmetic sites; reduce one +; finalize *, /, +
    assert len(generate_mutants("pi")) == hand_count(get_job("pi")) == 1 + 5 + 5 + 5 + 8 * 3 + 3 + 3 * 3
    assert len(generate_mutants("wordcount")) == 5 + 3


def test_mutants_differ_from_base_in_exactly_one_operator():
    for name in ("pi", "wordcount"):
        job = get_job(name)
        mutants = generate_mutants(job)
        assert [m.id for m in mutants] == [f"M{i}" for i in range(len(mutants))]
        assert len({(m.section, m.path, m.replacement) for m in mutants}) == len(mutants)
        for m in mutants:
            mutated = apply_mutation(job, m.mutation())
            assert operator_diff(job.bodies[m.section], mutated.bodies[m.section]) == \
                [(m.path, m.original, m.replacement)]
            assert ex.operator_class(m.original) == ex.operator_class(m.replacement)


def test_sections_visited_in_order():
    sections = [m.section for m in generate_mutants("pi")]
    assert sections == sorted(sections, key=["map", "reduce", "finalize"].index)


def test_load_hand_written_mutants():
    job, mutants, categories = load_mutants(fixture_path("table2_pi_mutants.json"))
    assert job == "pi"
    assert set(categories.values()) == {"null", "value", "equivalent"}
    assert all(m.original != m.replacement for m in mutants)


def test_substitute_only_touches_send_job(table1_pi):
    tc = substitute(table1_pi, "pi", {"section": "finalize", "path": [1], "op": "+"})
    send = next(i for a in tc.actions for i in a.instructions if i.args.get("job") == "pi")
    assert send.args["args"]["mutant"]["op"] == "+"
    assert "mutant" not in next(i for a in table1_pi.actions for i in a.instructions
                                if i.args.get("job") == "pi").args["args"]
    assert [a.id for a in tc.actions] == [a.id for a in table1_pi.actions]


def sim_runner(tc):
    return run_case(tc, HarnessConfig(backend="sim"))


def test_analysis_on_sim_backend(table1_pi):
    _, mutants, categories = load_mutants(fixture_path("table2_pi_mutants.json"))
    matrix = run_mutation_analysis("pi", table1_pi, sim_runner, mutants=mutants)
    assert matrix.base_output == "3.141624"
    for row in matrix.rows:
        want = "equivalent" if categories[row.mutant.id] == "equivalent" else "killed"
        assert row.classification == want
        assert row.consistent
    nulls = [r for r in matrix.rows if categories[r.mutant.id] == "null"]
    assert all(r.output == "null" and r.verdict is Outcome.FAIL for r in nulls)


def test_base_failing_its_own_test_aborts(table1_pi):
    from mrharness.cli import override_expected
    with pytest.raises(BaseJobFailed):
        run_mutation_analysis("pi", override_expected(table1_pi, 9.9), sim_runner, mutants=[])


def test_job_not_in_testcase_aborts(table1_pi):
    with pytest.raises(BaseJobFailed):
        run_mutation_analysis("wordcount", table1_pi, sim_runner, mutants=[])


def test_empty_matrix_reports_na():
    text, machine = report(KillMatrix("pi", "3.14"))
    assert machine["summary"]["kill_ratio_text"] == "n/a"
    assert "n/a" in text and "total 0" in text


def test_inconsistent_rows_flagged():
    rows = [
        {"id": "M0", "output": 1.0, "verdict": "pass", "classification": "killed"},
        {"id": "M1", "output": 3.14, "verdict": "pass", "classification": "equivalent"},
        {"id": "M2", "output": None, "verdict": "inconclusive", "classification": "killed"},
    ]
    s = summarize(rows)
    assert s["inconsistent"] == ["M0", "M2"]
    assert s["kill_ratio_text"] == "0%"
    text, _ = report(rows)
    assert "mismatch: M0, M2" in text


def test_report_layout_and_null_display():
    rows = [{"id": "M0", "output": None, "verdict": "fail", "classification": "killed"},
            {"id": "M1", "output": 3.141624, "verdict": "pass", "classification": "equivalent"}]
    text, machine = report(rows, base_output="3.141624")
    lines = text.splitlines()
    assert lines[0] == "original output: 3.1416"
    assert lines[1].split()[:4] == ["Mutant", "Result", "Pass", "Fail"]
    assert lines[3].split()[:3] == ["M0", "NULL", "X"]
    assert "3.1416" in lines[4]
    assert json.loads(json.dumps(machine))["summary"]["kill_ratio"] == 1.0


def _finalize_only(body):
    base = get_job("pi")
    return JobDefinition("tiny", {"finalize": body}, {"finalize": {"I": ex.NUM, "T": ex.NUM}}, base.build)


def test_two_arithmetic_sites_give_six_mutants():
    body = ex.Emit(ex.Const("pi"), ex.Binary("*", ex.Const(4), ex.Binary("/", ex.Var("I"), ex.Var("T"))))
    mutants = generate_mutants(_finalize_only(body))
    assert len(mutants) == 6
    assert {(m.original, m.replacement) for m in mutants} == {
        ("*", "+"), ("*", "-"), ("*", "/"), ("/", "+"), ("/", "-"), ("/", "*")}


def test_operator_free_job_has_no_mutants():
    assert generate_mutants(_finalize_only(ex.Emit(ex.Const("pi"), ex.Const(3.0)))) == []


def test_division_to_multiplication_in_finalize():
    job = apply_mutation(get_job("pi"), {"section": "finalize", "path": [1, 1], "op": "*"})
    _, emitted = ex.evaluate(job.bodies["finalize"], {"inside": 780_000, "outside": 220_000})
    assert emitted == [("pi", 4 * (780_000 * 1_000_000))]


def test_identity_substitution_is_equivalent(table1_pi):
    identity = Mutant("Mid", "pi", "finalize", (1,), "*", "*")
    matrix = run_mutation_analysis("pi", table1_pi, sim_runner, mutants=[identity])
    (row,) = matrix.rows
    assert row.classification == "equivalent" and row.verdict is Outcome.PASS


def test_all_equivalent_matrix_reports_na(table1_pi):
    _, mutants, categories = load_mutants(fixture_path("table2_pi_mutants.json"))
    equivalent = [m for m in mutants if categories[m.id] == "equivalent"]
    matrix = run_mutation_analysis("pi", table1_pi, sim_runner, mutants=equivalent)
    _, machine = report(matrix)
    assert machine["summary"]["killed"] == 0
    assert machine["summary"]["kill_ratio_text"] == "n/a"


def test_parallel_runners_match_sequential(table1_pi):
    mutants = generate_mutants("pi")[:12]
    seq = run_mutation_analysis("pi", table1_pi, sim_runner, mutants=mutants)
    par = run_mutation_analysis("pi", table1_pi, [sim_runner] * 4, mutants=mutants)
    assert par.to_json() == seq.to_json()
