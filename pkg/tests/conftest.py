import pytest

# (criterion, passed, detail) rows filled in by the acceptance suite
ACCEPTANCE = []


@pytest.fixture()
def report_criterion():
    def record(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
