import numpy as np
import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_record():
    """Collects one pass/fail line per acceptance criterion.

    Tests record before asserting, so the terminal summary shows a
    verdict for every criterion even when some fail.
    """
    def record(num: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {num}: {title}"
        if detail:
            line += f" [{detail}]"
        ACCEPTANCE_LINES.append((num, line))
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
