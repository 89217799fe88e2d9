"""Command line: run test cases, mutation analysis, overhead benchmarks."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import statistics
import sys
import threading
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

from mrharness.coordinator import Outcome, RegistrationError, RegistrationTimeout
from mrharness.harness import HarnessConfig, HarnessError, HarnessRun, run_case
from mrharness.jobs.registry import JOBS, UnknownJob, build_job, get_job
from mrharness.minimr.client import submit_job
from mrharness.minimr.master import HEARTBEAT_MS
from mrharness.model import (
    Action,
    Instruction,
    InvalidTestCase,
    Opcode,
    Role,
    TestCase,
    TestCaseFormatError,
    load_testcase,
    validate,
)
from mrharness.transport.real import DEFAULT_PORT

EXIT_PASS, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_ERROR = 0, 1, 2, 3
EXIT_CODES = {Outcome.PASS: EXIT_PASS, Outcome.FAIL: EXIT_FAIL, Outcome.INCONCLUSIVE: EXIT_INCONCLUSIVE}

FIXTURES = ("table1_pi.json", "table1_wordcount.json", "table2_pi_mutants.json")


class UsageError(Exception):
    """Anything that maps to the harness-error exit code."""


# -- test case loading ------------------------------------------------------------


def resolve_testcase_path(name: str) -> Path:
    """A path on disk, or the name of a bundled fixture."""
    p = Path(name)
    if p.exists():
        return p
    bundled = resources.files("mrharness") / "fixtures" / p.name
    if p.name in FIXTURES and bundled.is_file():
        return Path(str(bundled))
    raise UsageError(f"no such test case file: {name}")


def read_testcase(name: str) -> TestCase:
    path = resolve_testcase_path(name)
    try:
        tc = load_testcase(path)
    except (TestCaseFormatError, json.JSONDecodeError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"{path}: invalid test case: {exc}") from None
    errors = validate(tc)
    if errors:
        raise UsageError(f"{path}: invalid test case:\n  " + "\n  ".join(errors))
    return tc


def override_expected(tc: TestCase, expected: Any) -> TestCase:
    actions = []
    for a in tc.actions:
        instructions = tuple(
            Instruction(i.opcode, {**i.args, "expected": expected}) if i.opcode is Opcode.ASSERT_OUTPUT else i
            for i in a.instructions
        )
        actions.append(Action(a.id, a.targets, instructions, a.timeout_ms, a.level))
    return TestCase(tc.name, tc.testers, tuple(actions), tc.roles)


def without_faults(tc: TestCase) -> TestCase:
    """The same scenario minus DROP_WORKER; workers that would have been
    dropped are stopped with the others instead."""
    dropped = {t for a in tc.actions for i in a.instructions if i.opcode is Opcode.DROP_WORKER for t in a.targets}
    actions = []
    for a in tc.actions:
        kept = tuple(i for i in a.instructions if i.opcode is not Opcode.DROP_WORKER)
        if not kept:
            continue
        targets = a.targets
        if any(i.opcode is Opcode.STOP_WORKERS for i in kept):
            targets = targets | dropped
        actions.append(Action(a.id, targets, kept, a.timeout_ms, a.level))
    return TestCase(f"{tc.name}_nofault", tc.testers, tuple(actions), tc.roles)


# -- run report -------------------------------------------------------------------


@dataclass
class RunReport:
    name: str
    verdict: Outcome
    rows: list[dict[str, Any]]
    wall_ms: float
    config: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_run(cls, tc: TestCase, run: HarnessRun) -> "RunReport":
        order = {a.id: n for n, a in enumerate(tc.actions)}
        entries = sorted(run.verdict.log.entries, key=lambda v: (order.get(v.action_id, 0), v.tester))
        rows = [{"action": v.action_id, "tester": v.tester, "verdict": v.outcome.value,
                 "elapsed_ms": v.elapsed_ms, "detail": v.detail} for v in entries]
        return cls(tc.name, run.verdict.outcome, rows, run.wall_ms, dict(run.config))

    def to_json(self) -> dict[str, Any]:
        return {"testcase": self.name, "verdict": self.verdict.value, "verdicts": self.rows,
                "wall_ms": round(self.wall_ms, 3), "config": self.config}

    def render(self) -> str:
        lines = [f"test case {self.name}: {self.verdict.value.upper()}  ({self.wall_ms:.0f} ms)"]
        for r in self.rows:
            lines.append(f"  {r['action']:<6} {r['tester']:<5} {r['verdict']:<13} {r['elapsed_ms']:>8} ms  {r['detail']}")
        lines.append("  config: " + ", ".join(f"{k}={v}" for k, v in self.config.items()))
        return "\n".join(lines)


# -- config -----------------------------------------------------------------------


def read_hosts(path: str) -> dict[str, str]:
    """`tN host` per line; blank lines and # comments ignored."""
    hosts: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read hosts file: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise UsageError(f"{path}:{n}: expected 'tester-id host'")
        hosts[parts[0]] = parts[1]
    return hosts


def harness_config(args: argparse.Namespace) -> HarnessConfig:
    return HarnessConfig(
        port=args.port,
        mr_port=args.mr_port,
        backend=args.backend,
        launch=args.launch,
        heartbeat_ms=args.heartbeat_ms,
        registration_window_ms=args.registration_window_ms,
        external_testers=args.hosts is not None,
        seed=args.seed,
        verbose=args.verbose,
    )


def print_external_launch(tc: TestCase, hosts: dict[str, str], config: HarnessConfig) -> None:
    missing = sorted(str(t) for t in tc.testers if str(t) not in hosts)
    if missing:
        raise UsageError(f"hosts file has no entry for {', '.join(missing)}")
    master_host = hosts[str(tc.master)]
    mr_port = config.mr_port or 7800
    config.mr_port = mr_port
    print("start on each host (coordinator listens on this machine, port %d):" % config.port, file=sys.stderr)
    for t in sorted(tc.testers):
        print(f"  [{hosts[str(t)]}] mrharness tester --coordinator <this-host>:{config.port} --id {t} "
              f"--role {tc.roles[t].value} --mr-host {master_host} --mr-port {mr_port}", file=sys.stderr)


def execute(tc: TestCase, config: HarnessConfig) -> HarnessRun:
    try:
        return run_case(tc, config)
    except (RegistrationTimeout, RegistrationError, InvalidTestCase, HarnessError) as exc:
        raise UsageError(str(exc)) from None


def write_json(path: str | None, obj: Any) -> None:
    if path:
        Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def parse_expect(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


# -- commands ---------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    tc = read_testcase(args.file)
    if args.expect is not None:
        tc = override_expected(tc, parse_expect(args.expect))
    config = harness_config(args)
    if args.hosts:
        print_external_launch(tc, read_hosts(args.hosts), config)
    report = RunReport.from_run(tc, execute(tc, config))
    print(report.render())
    write_json(args.report, report.to_json())
    return EXIT_CODES[report.verdict]


def cmd_mutate(args: argparse.Namespace) -> int:
    from mrharness.mutation import BaseJobFailed, load_mutants, report, run_mutation_analysis

    try:
        get_job(args.job)
    except UnknownJob:
        raise UsageError(f"unknown job {args.job!r}; known: {', '.join(sorted(JOBS))}") from None
    tc = read_testcase(args.file)
    config = harness_config(args)
    mutants = None
    if args.mutants:
        try:
            job, mutants, _ = load_mutants(resolve_testcase_path(args.mutants))
        except (OSError, ValueError, KeyError, UnknownJob) as exc:
            raise UsageError(f"bad mutants file: {exc}") from None
        if job != args.job:
            raise UsageError(f"mutants file is for job {job!r}, not {args.job!r}")

    def progress(row) -> None:
        if args.verbose:
            print(f"{row.mutant.id} {row.mutant.site}: {row.verdict.value} ({row.classification})", file=sys.stderr)

    if args.parallel < 1:
        raise UsageError("--parallel must be at least 1")
    runners = [_slot_runner(config, slot) for slot in range(args.parallel)]
    try:
        matrix = run_mutation_analysis(args.job, tc, runners, mutants=mutants, progress=progress)
    except BaseJobFailed as exc:
        raise UsageError(str(exc)) from None
    text, machine = report(matrix)
    print(text)
    write_json(args.report, machine["rows"])
    summary = machine["summary"]
    ok = summary["detected"] == summary["killed"] and not summary["inconsistent"]
    return EXIT_PASS if ok else EXIT_FAIL


def _slot_runner(config: HarnessConfig, slot: int):
    """Runner for one parallel slot; fixed ports are offset per slot so
    concurrent runs never share an endpoint."""
    cfg = replace(config, port=config.port + slot if config.port else 0,
                  mr_port=config.mr_port + slot if config.mr_port else None)
    return lambda case: execute(case, cfg)


def cmd_report(args: argparse.Namespace) -> int:
    from mrharness.mutation import report

    try:
        rows = json.loads(Path(args.matrix).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read kill matrix: {exc}") from None
    if isinstance(rows, dict) and "rows" in rows:
        rows = rows["rows"]
    if not isinstance(rows, list) or not all(
        isinstance(r, dict) and {"id", "output", "verdict", "classification"} <= r.keys() for r in rows
    ):
        raise UsageError("kill matrix must be a list of {id, output, verdict, classification}")
    text, machine = report(rows)
    print(text)
    write_json(args.report, machine)
    return EXIT_PASS


def _mean_sd(xs: list[float]) -> tuple[float, float | None]:
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else None)


def raw_run(tc: TestCase, config: HarnessConfig) -> float:
    """The scenario's SUT steps without coordinator or testers: start a
    master and the same number of workers, submit the job, stop everything."""
    from mrharness.harness import free_port
    from mrharness.tester import Tester, TesterConfig

    send = next(i for a in tc.actions for i in a.instructions if i.opcode is Opcode.SEND_JOB)
    n_workers = sum(
        int(i.args.get("count", 1)) * len(a.targets)
        for a in tc.actions for i in a.instructions if i.opcode is Opcode.START_WORKERS
    )
    spec = build_job(send.args["job"], send.args.get("args", {}))
    mr_port = config.mr_port or free_port(config.host)
    cfg = TesterConfig(config.host, mr_port, config.heartbeat_ms, config.launch)
    start = time.monotonic()
    master = Tester("raw-m", Role.MASTER, cfg)
    workers = Tester("raw-w", Role.WORKER, cfg)
    try:
        handle = master.start_master()
        for _ in range(n_workers):
            workers.start_worker()
        submit_job(handle.address, spec, timeout=300.0)
        workers.stop_workers()
        master.stop_master()
    finally:
        workers.cleanup()
        master.cleanup()
    return (time.monotonic() - start) * 1000.0


def bench(job: str, runs: int, config: HarnessConfig, testcase: TestCase | None = None) -> dict[str, Any]:
    tc = without_faults(testcase or read_testcase(f"table1_{job}.json"))
    raw: list[float] = []
    harnessed: list[float] = []
    for i in range(runs + 1):  # first round is a discarded warm-up
        r = raw_run(tc, config)
        run = execute(tc, config)
        if run.verdict.outcome is not Outcome.PASS:
            raise UsageError(f"harnessed run {i} did not pass: {run.verdict.outcome.value}")
        if i:
            raw.append(r)
            harnessed.append(run.wall_ms)
    raw_mean, raw_sd = _mean_sd(raw)
    h_mean, h_sd = _mean_sd(harnessed)
    overhead = None if raw_mean < 1.0 else (h_mean - raw_mean) / raw_mean
    return {
        "job": job,
        "runs": runs,
        "raw_ms": raw,
        "harnessed_ms": harnessed,
        "raw_mean_ms": raw_mean,
        "raw_stddev_ms": raw_sd,
        "harnessed_mean_ms": h_mean,
        "harnessed_stddev_ms": h_sd,
        "overhead": overhead,
        "config": {"launch": config.launch, "heartbeat_ms": config.heartbeat_ms, "testcase": tc.name},
    }


def render_bench(result: dict[str, Any]) -> str:
    def fmt(mean: float, sd: float | None) -> str:
        return f"mean {mean:9.1f} ms  stddev {'n/a' if sd is None else f'{sd:7.1f} ms'}"

    lines = [
        f"bench {result['job']} ({result['runs']} runs after 1 warm-up, {result['config']['testcase']})",
        f"  raw minimr : {fmt(result['raw_mean_ms'], result['raw_stddev_ms'])}",
        f"  harnessed  : {fmt(result['harnessed_mean_ms'], result['harnessed_stddev_ms'])}",
    ]
    if result["overhead"] is None:
        lines.append("  overhead   : n/a (raw runtime below 1 ms; absolute times only)")
    else:
        lines.append(f"  overhead   : {result['overhead']:+.1%}")
    return "\n".join(lines)


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        get_job(args.job)
    except UnknownJob:
        raise UsageError(f"unknown job {args.job!r}; known: {', '.join(sorted(JOBS))}") from None
    if args.runs < 1:
        raise UsageError("--runs must be at least 1")
    tc = read_testcase(args.file) if args.file else None
    result = bench(args.job, args.runs, harness_config(args), tc)
    print(render_bench(result))
    write_json(args.report, result)
    return EXIT_PASS


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--port", type=int, default=int(os.environ.get("MRHARNESS_PORT", DEFAULT_PORT)),
                        help="coordinator port (env MRHARNESS_PORT, default %(default)s)")
    common.add_argument("--mr-port", type=int, help="minimr master port (default: a free port)")
    common.add_argument("--seed", type=int, default=0, help="simulator seed")
    common.add_argument("--backend", choices=["real", "sim"], default="real")
    common.add_argument("--hosts", help="file of 'tN host' lines; testers are started there by hand")
    common.add_argument("--launch", choices=["process", "thread"], default="process",
                        help="run testers and minimr nodes as processes or as threads of this process")
    common.add_argument("--heartbeat-ms", type=int, default=HEARTBEAT_MS)
    common.add_argument("--registration-window-ms", type=int, default=10_000)
    common.add_argument("--report", help="write the machine-readable report here")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mrharness", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run one test case")
    p.add_argument("file")
    p.add_argument("--expect", help="override every ASSERT_OUTPUT expected value (JSON)")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("mutate", parents=[common], help="mutation analysis of a job")
    p.add_argument("job")
    p.add_argument("file")
    p.add_argument("--mutants", help="JSON file of hand-written mutants instead of generating all of them")
    p.add_argument("--parallel", type=int, default=1,
                   help="mutant runs in flight at once, each on its own coordinator and master ports")
    p.set_defaults(func=cmd_mutate)
    p = sub.add_parser("bench", parents=[common], help="harness overhead on a job")
    p.add_argument("job")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--file", help="test case to time (default: the bundled one for the job, without faults)")
    p.set_defaults(func=cmd_bench)
    p = sub.add_parser("report", parents=[common], help="summarize a saved kill matrix")
    p.add_argument("matrix")
    p.set_defaults(func=cmd_report)
    return parser


def _terminate(signum, frame):
    # unwinds through the harness's finally blocks, which reap every child
    raise SystemExit(128 + signum)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv[:1] == ["tester"]:
        from mrharness.tester import main as tester_main

        return tester_main(argv[1:])
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, _terminate)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mrharness: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
