"""Echo acceptance verdict lines after the run summary.

Without ``-s`` pytest swallows stdout from passing tests; the gate's
one-line-per-criterion report still has to reach the terminal.
"""

import sys


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance") or sys.modules.get(
        "tests.test_acceptance")
    if module is not None and module.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in module.VERDICTS:
            terminalreporter.write_line(line)
