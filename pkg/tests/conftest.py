import os
import sys

import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("hairmv", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("hairmv")

torch.set_num_threads(1)


@pytest.fixture
def cfg_small():
    from hairmv.config import ModelConfig

    return ModelConfig()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


_CRITERIA: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    for n in getattr(report, "criteria", ()):
        _CRITERIA.setdefault(n, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    report.criteria = [m.args[0] for m in item.iter_markers("criterion")]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcomes = _CRITERIA[n]
        verdict = "PASS" if all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict} ({len(outcomes)} checks)")
