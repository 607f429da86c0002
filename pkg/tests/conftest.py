import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line: ``report(n, ok, what, detail)``; ok=None marks a skip."""
    def emit(n: int, ok, what: str, detail: str = "") -> None:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {n:>2} {status}  {what}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE_LINES.append(line)
        print(line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
