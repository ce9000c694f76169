import hypothesis
import numpy as np
import pytest

import gtplan.solver as solver

hypothesis.settings.register_profile("ci", max_examples=60, deadline=None)
hypothesis.settings.load_profile("ci")

np.seterr(all="warn", under="ignore")

# Every optimal solve in the test build is re-verified against the KKT
# conditions (feasibility, dual signs, strong duality).
solver.STRICT_CHECKS = True


_ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance_record():
    def record(criterion: str, passed: bool, detail: str = ""):
        _ACCEPTANCE_RESULTS.append((criterion, passed, detail))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in _ACCEPTANCE_RESULTS:
        mark = "PASS" if passed else "FAIL"
        line = f"[{mark}] {criterion}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
