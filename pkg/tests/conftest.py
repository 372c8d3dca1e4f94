import pytest

# acceptance tests append (criterion, passed, detail) here; printed after the run
ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    def add(criterion, passed, detail):
        ACCEPTANCE_LINES.append((criterion, bool(passed), detail))
        return passed

    return add


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda t: _order(t[0])):
        terminalreporter.write_line(f"criterion {criterion:<4} {'PASS' if passed else 'FAIL'}  {detail}")


def _order(label):
    digits = "".join(ch for ch in label if ch.isdigit())
    return (int(digits or 0), label)
