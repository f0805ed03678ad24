import re

import acceptance_report


def _order(line):
    num, suffix = re.match(r"\[criterion\s+(\d+)(\w*)\]", line).groups()
    return int(num), suffix


def pytest_terminal_summary(terminalreporter):
    if acceptance_report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_report.LINES, key=_order):
            terminalreporter.write_line(line)
