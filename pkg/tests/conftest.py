import pytest

_CRITERIA: dict = {}


@pytest.fixture(scope="session")
def record_criterion():
    """Store and print the outcome of one acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line, flush=True)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        terminalreporter.write_line(_CRITERIA.get(n, f"criterion {n:2d}: FAIL  not run, or errored before reporting"))
