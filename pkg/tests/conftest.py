import pytest

RESULTS: list[str] = []


@pytest.fixture
def record():
    """Collect one summary line per acceptance criterion."""

    def _record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
        RESULTS.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
