import json
from importlib import resources
from pathlib import Path

import pytest

from mrharness.harness import HarnessConfig
from mrharness.model import load_testcase


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("mrharness") / "fixtures" / name))


@pytest.fixture
def table1_pi():
    return load_testcase(fixture_path("table1_pi.json"))


@pytest.fixture
def table1_wordcount():
    return load_testcase(fixture_path("table1_wordcount.json"))


@pytest.fixture
def fast_config():
    """In-process testers and SUT nodes with a short heartbeat."""
    return HarnessConfig(port=0, launch="thread", heartbeat_ms=50)


def write_case(tmp_path: Path, obj: dict, name: str = "case.json") -> Path:
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return p


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config._criteria_lines = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = marker.args
        details = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        line = f"criterion {number} {'PASS' if rep.passed else 'FAIL'}: {title}"
        if details:
            line += f" [{details}]"
        item.config._criteria_lines.append(line)
        print(f"\n{line}")


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_criteria_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
