import os
import sys

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA = {}


def pytest_configure(config):
    config._acceptance_lines = _CRITERIA


def report_criterion(number: int, passed: bool, detail: str) -> None:
    """Record and print one acceptance line; the summary hook prints them again in order."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    _CRITERIA[number] = line
    sys.__stdout__.write("\n" + line + "\n")
    sys.__stdout__.flush()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
