import pytest

ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one summary line per acceptance criterion; printed after the run."""

    def record(label, passed, detail, seconds, limit=None):
        budget = "" if limit is None else f" / {limit:.0f} s"
        flag = "PASS" if passed else "FAIL"
        ACCEPTANCE.append(f"[{flag}] {label}: {detail} ({seconds:.1f} s{budget})")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
