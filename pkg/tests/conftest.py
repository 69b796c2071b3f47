import pytest

ACCEPTANCE: dict = {}


@pytest.fixture
def record_criterion(capsys):
    """Print and remember one PASS/FAIL line for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str):
        line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
