"""Launch a coordinator plus testers on this machine and run one test case."""

from __future__ import annotations

import logging
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Any

from mrharness.coordinator import (
    DEFAULT_REGISTRATION_WINDOW_MS,
    Coordinator,
    GlobalVerdict,
    TraceEvent,
)
from mrharness.minimr.master import HEARTBEAT_MS
from mrharness.model import TestCase
from mrharness.tester import DryRun, Tester, TesterAgent, TesterConfig
from mrharness.transport.real import DEFAULT_PORT, CoordinatorServer, TesterLink
from mrharness.transport.sim import SimConfig, SimNetwork, SimSession, SimTester

log = logging.getLogger(__name__)


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


@dataclass
class HarnessConfig:
    port: int = DEFAULT_PORT
    mr_port: int | None = None  # None: pick a free port
    backend: str = "real"  # "real" | "sim"
    launch: str = "process"  # "process" | "thread" (real backend only)
    heartbeat_ms: int = HEARTBEAT_MS
    registration_window_ms: int = DEFAULT_REGISTRATION_WINDOW_MS
    host: str = "127.0.0.1"
    external_testers: bool = False  # testers started elsewhere (multi-host)
    seed: int = 0
    verbose: bool = False


@dataclass
class HarnessRun:
    verdict: GlobalVerdict
    wall_ms: float
    trace: list[TraceEvent]
    config: dict[str, Any] = field(default_factory=dict)


class HarnessError(RuntimeError):
    pass


def run_case(tc: TestCase, config: HarnessConfig | None = None) -> HarnessRun:
    config = config or HarnessConfig()
    if config.backend == "sim":
        return _run_sim(tc, config)
    return _run_real(tc, config)


def _run_sim(tc: TestCase, config: HarnessConfig) -> HarnessRun:
    network = SimNetwork(SimConfig(latency_ms=1, rng_seed=config.seed))
    session = SimSession(network)
    behavior = DryRun()
    for t in sorted(tc.testers):
        SimTester(network, str(t), tc.roles[t].value, behavior)
    coord = Coordinator(session, config.registration_window_ms)
    verdict = coord.run_test(tc)
    return HarnessRun(verdict, network.clock, coord.trace, {"backend": "sim", "seed": config.seed})


def _run_real(tc: TestCase, config: HarnessConfig) -> HarnessRun:
    mr_port = config.mr_port if config.mr_port is not None else free_port(config.host)
    bind_host = "0.0.0.0" if config.external_testers else config.host
    try:
        session = CoordinatorServer(bind_host, config.port)
    except OSError as exc:
        raise HarnessError(f"cannot listen on {bind_host}:{config.port}: {exc}") from None
    coord = Coordinator(session, config.registration_window_ms)
    procs: list[subprocess.Popen] = []
    agents: list[tuple[TesterAgent, threading.Thread]] = []
    echo = {
        "backend": "real",
        "launch": "external" if config.external_testers else config.launch,
        "port": session.port,
        "mr_port": mr_port,
        "heartbeat_ms": config.heartbeat_ms,
        "seed": config.seed,
    }
    start = time.monotonic()
    try:
        if not config.external_testers:
            for t in sorted(tc.testers):
                role = tc.roles[t].value
                if config.launch == "thread":
                    tester = Tester(str(t), tc.roles[t],
                                    TesterConfig(config.host, mr_port, config.heartbeat_ms, "thread"))
                    link = TesterLink(str(t), (config.host, session.port))
                    link.connect()
                    agent = TesterAgent(tester, link)
                    th = threading.Thread(target=agent.serve, daemon=True, name=f"tester-{t}")
                    th.start()
                    agents.append((agent, th))
                else:
                    cmd = [sys.executable, "-m", "mrharness", "tester",
                           "--coordinator", f"{config.host}:{session.port}", "--id", str(t), "--role", role,
                           "--mr-host", config.host, "--mr-port", str(mr_port),
                           "--heartbeat-ms", str(config.heartbeat_ms)]
                    if config.verbose:
                        cmd.append("-v")
                    procs.append(subprocess.Popen(cmd, stdin=subprocess.DEVNULL,
                                                  stdout=None if config.verbose else subprocess.DEVNULL))
        verdict = coord.run_test(tc)
    finally:
        coord.shutdown_testers(session.connected())
        _reap(procs, agents)
        session.close()
    wall_ms = (time.monotonic() - start) * 1000.0
    return HarnessRun(verdict, wall_ms, coord.trace, echo)


def _reap(procs: list[subprocess.Popen], agents: list, timeout: float = 10.0) -> None:
    end = time.monotonic() + timeout
    for agent, th in agents:
        th.join(max(0.0, end - time.monotonic()))
    for p in procs:
        try:
            p.wait(max(0.1, end - time.monotonic()))
        except subprocess.TimeoutExpired:
            p.terminate()
            try:
                p.wait(2.0)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()

