import pytest

from simmeta.study import expand_grid, run_study

SMALL_GRID = dict(n=[40, 80], b1=[0, 0.3, 0.5], prop_treated=[0.5], b2=[0.3, 0.6],
                  b3=[0, 0.4])


@pytest.fixture(scope="session")
def small_estimates():
    """24 conditions x 15 replications x 3 estimators."""
    return run_study(expand_grid(SMALL_GRID), 15, 77)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
