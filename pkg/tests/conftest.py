import pytest

ACCEPTANCE = {}


@pytest.fixture
def report():
    """Record one acceptance line: report("A1", passed, "detail")."""
    def _report(key, passed, detail):
        ACCEPTANCE[key] = (bool(passed), detail)
        print(f"{key} {'PASS' if passed else 'FAIL'}: {detail}")
    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if passed else 'FAIL'}: {detail}")
