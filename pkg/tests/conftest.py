"""Shared pytest configuration: acceptance-gate summary lines."""


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    try:
        from test_acceptance import CRITERIA_RESULTS
    except ImportError:
        return
    if not CRITERIA_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA_RESULTS):
        status, detail = CRITERIA_RESULTS[number]
        terminalreporter.write_line(
            f"[{status}] criterion {number:>2}: {detail}")
