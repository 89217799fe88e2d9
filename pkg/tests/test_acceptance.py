"""Acceptance criteria, one test each; the terminal summary prints a
PASS/FAIL line per criterion."""

import json
import math
import random
import subprocess
import sys
import threading
import time

import pytest

from mrharness.cli import main as cli_main
from mrharness.coordinator import Outcome
from mrharness.harness import HarnessConfig, run_case
from mrharness.jobs.registry import apply_mutation, build_job, get_job
from mrharness.minimr.client import LocalCluster
from mrharness.minimr.kv import canonical
from mrharness.minimr.reference import run_reference
from mrharness.minimr.worker import wait_until
from mrharness.mutation import generate_mutants, load_mutants, run_mutation_analysis

from conftest import fixture_path
from simcases import check, random_scenario, run_scenario

PI_SEED42 = 3.143112  # 4 * 785778 / 1e6, frozen from the scalar-loop oracle in test_jobs


def thread_runner(tc):
    return run_case(tc, HarnessConfig(port=0, launch="thread", heartbeat_ms=50))


@pytest.mark.criterion(1, "bundled pi scenario with a worker drop passes on local processes in under 60 s")
def test_table1_scenario(record_property):
    start = time.monotonic()
    out = subprocess.run([sys.executable, "-m", "mrharness", "run", "table1_pi.json", "--port", "0"],
                         capture_output=True, text=True, timeout=120)
    wall = time.monotonic() - start
    record_property("detail", f"exit {out.returncode}, {wall:.1f} s")
    assert out.returncode == 0, out.stdout + out.stderr
    assert "table1_pi: PASS" in out.stdout
    assert "dropped t2-w1" in out.stdout  # the fault really happened
    assert wall < 60


def _submit_with_kill(cluster, spec, nth_assign=1, before_submit=False):
    """Submit `spec` and kill worker w0, either just before submission (the
    master still believes it alive) or once it has received its nth task.
    Returns the result and whether w0 was declared dead while the job ran."""
    events = cluster.master.events
    if before_submit:
        cluster.workers[0].kill()
        result = cluster.submit(spec)
    else:
        result = {}
        t = threading.Thread(target=lambda: result.setdefault("r", cluster.submit(spec)))
        t.start()
        assigned = lambda: sum(e == "assign" and s.endswith("@w0") for _, e, s in events)
        wait_until(lambda: assigned() >= nth_assign or "r" in result, 10)
        if "r" not in result:
            cluster.workers[0].kill()
        t.join(60)
        result = result["r"]
    kinds = [(e, s) for _, e, s in list(events)]
    submitted = next(i for i, (e, _) in enumerate(kinds) if e == "submit")
    finished = next((i for i, (e, _) in enumerate(kinds) if e == "finish"), len(kinds))
    mid_job = any(e == "dead" and s == "w0" for e, s in kinds[submitted:finished])
    return result, mid_job


@pytest.mark.criterion(2, "pi seed 42, M=10, n=1e5: within 0.01 of pi, bit-identical for 1/2/5 workers and a mid-job kill")
def test_pi_determinism(record_property):
    spec = build_job("pi", {"maps": 10, "points_per_map": 100_000, "seed": 42})
    outputs = {}
    for n in (1, 2, 5):
        with LocalCluster(n, heartbeat_ms=50) as cluster:
            outputs[f"{n} workers"] = cluster.submit(spec).output
    with LocalCluster(5, heartbeat_ms=50) as cluster:
        result, was_killed = _submit_with_kill(cluster, spec, nth_assign=1)
        outputs["5 workers, w0 killed"] = result.output
    assert was_killed
    record_property("detail", f"pi_hat {PI_SEED42!r}, |err| {abs(PI_SEED42 - math.pi):.6f}")
    assert abs(PI_SEED42 - math.pi) <= 0.01
    for label, value in outputs.items():
        assert value == PI_SEED42 and repr(value) == repr(PI_SEED42), label


@pytest.mark.criterion(3, "every non-equivalent mutant killed, every equivalent mutant passes, rows consistent")
@pytest.mark.parametrize("job, fixture", [("pi", "table1_pi.json"), ("wordcount", "table1_wordcount.json")])
def test_full_mutation_analysis(job, fixture, record_property):
    from mrharness.model import load_testcase

    tc = load_testcase(fixture_path(fixture))
    matrix = run_mutation_analysis(job, tc, thread_runner)
    send = next(i for a in tc.actions for i in a.instructions if i.args.get("job") == job)
    killed = [r for r in matrix.rows if r.classification == "killed"]
    equivalent = [r for r in matrix.rows if r.classification == "equivalent"]
    record_property("detail", f"{job}: {len(matrix.rows)} mutants, {len(killed)} killed, {len(equivalent)} equivalent")
    assert len(matrix.rows) == len(generate_mutants(job))
    assert all(r.verdict is Outcome.FAIL for r in killed)
    assert all(r.verdict is Outcome.PASS for r in equivalent)
    assert matrix.inconsistent() == []
    # the observed outputs agree with the reference executor run on each mutant
    for r in matrix.rows:
        expected = run_reference(build_job(job, {**send.args["args"], "mutant": r.mutant.mutation()}))
        assert r.output == canonical(expected), r.mutant.id


@pytest.mark.criterion(4, "hand-written mutant replay: original 3.1416, NULL mutants fail, one mutant per category")
def test_table2_replay(record_property):
    from mrharness.model import load_testcase
    from mrharness.mutation import report

    job, mutants, categories = load_mutants(fixture_path("table2_pi_mutants.json"))
    assert set(categories.values()) == {"value", "null", "equivalent"}
    tc = load_testcase(fixture_path("table1_pi.json"))
    matrix = run_mutation_analysis(job, tc, thread_runner, mutants=mutants)
    text, machine = report(matrix)
    record_property("detail", ", ".join(f"{r['id']}={'NULL' if r['output'] is None else r['output']}/{r['verdict']}" for r in machine["rows"]))
    assert text.splitlines()[0] == "original output: 3.1416"
    for r in matrix.rows:
        cat = categories[r.mutant.id]
        if cat == "null":
            assert (r.output, r.verdict) == ("null", Outcome.FAIL)
            assert any(line.split()[:3] == [r.mutant.id, "NULL", "X"] for line in text.splitlines())
        elif cat == "value":
            assert r.output not in ("null", matrix.base_output) and r.verdict is Outcome.FAIL
        else:
            assert r.output == matrix.base_output and r.verdict is Outcome.PASS


@pytest.mark.criterion(5, "1000 simulated scenarios: level order, parallel dispatch, timeouts, oracle precedence, full log")
def test_sim_property_suite(record_property):
    start = time.monotonic()
    violations = {}
    for seed in range(1000):
        sc = random_scenario(seed)
        errs = check(sc, run_scenario(sc))
        if errs:
            violations[seed] = errs
    elapsed = time.monotonic() - start
    record_property("detail", f"1000 cases, {len(violations)} violations, {elapsed:.1f} s")
    assert violations == {}
    assert elapsed < 120


def _random_text(rng):
    vocab = ["a", "b", "the", "fox", "dog", "é", "x" * 12, "Quick", "quick", "1", "a-b"]
    lines = []
    for _ in range(rng.randint(0, 15)):
        seps = [" ", "  ", "\t", " \t "]
        words = [rng.choice(vocab) for _ in range(rng.randint(0, 8))]
        lines.append(rng.choice(["", " "]) + rng.choice(seps).join(words) + rng.choice(["", " "]))
    return "\n".join(lines) + rng.choice(["", "\n"])


def _differential_cases():
    rng = random.Random(2024)
    cases = []
    for _ in range(200):
        cases.append(build_job("wordcount", {"input": _random_text(rng), "maps": rng.randint(1, 6),
                                             "reducers": rng.randint(1, 4)}))
    for _ in range(50):
        cases.append(build_job("pi", {"maps": rng.randint(1, 12), "points_per_map": rng.randint(1, 20_000),
                                      "seed": rng.randrange(2**63), "reducers": rng.randint(1, 3)}))
    return rng, cases


@pytest.mark.criterion(6, "200 WordCount + 50 pi inputs: distributed output equals reference, with and without a worker kill")
def test_differential(record_property):
    rng, cases = _differential_cases()
    mismatches = []
    with LocalCluster(3, heartbeat_ms=50) as cluster:
        for i, spec in enumerate(cases):
            if cluster.submit(spec).output != run_reference(spec):
                mismatches.append(("plain", i))
    early = late = 0  # kill runs in which w0 was declared dead while the job ran
    for i, spec in enumerate(cases):
        before = i % 2 == 0
        with LocalCluster(3, heartbeat_ms=50) as cluster:
            result, mid_job = _submit_with_kill(cluster, spec, nth_assign=rng.randint(1, 2), before_submit=before)
        early += before and mid_job
        late += not before and mid_job
        if result.output != run_reference(spec):
            mismatches.append(("kill", i))
    record_property("detail", f"{len(cases)} inputs x 2, w0 declared dead mid-job in {early + late} kill runs, "
                              f"{len(mismatches)} mismatches")
    assert mismatches == []
    # killing before submission must actually hit the job; late kills race tiny jobs
    assert early >= 0.9 * len(cases[::2])


@pytest.mark.criterion(7, "bench pi reports mean/stddev and raw mean < harnessed mean")
def test_bench(tmp_path, capsys, record_property):
    report = tmp_path / "bench.json"
    assert cli_main(["bench", "pi", "--port", "0", "--report", str(report)]) == 0
    out = capsys.readouterr().out
    data = json.loads(report.read_text())
    record_property("detail", f"raw {data['raw_mean_ms']:.0f} ms, harnessed {data['harnessed_mean_ms']:.0f} ms, "
                              f"overhead {data['overhead']:+.0%}")
    assert "mean" in out and "stddev" in out
    assert len(data["raw_ms"]) == len(data["harnessed_ms"]) == 5
    assert data["raw_stddev_ms"] is not None and data["harnessed_stddev_ms"] is not None
    assert data["raw_mean_ms"] < data["harnessed_mean_ms"]
