"""Shared pytest plumbing: the acceptance-criteria summary block.

Acceptance tests record one line per criterion through record_criterion;
the terminal summary prints them after the run so pass/fail status is
visible without -s.
"""

_CRITERIA = {}


def record_criterion(number, ok, detail):
    _CRITERIA[number] = f"{'PASS' if ok else 'FAIL'} - {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(
            f"criterion {number:2d}: {_CRITERIA[number]}")
