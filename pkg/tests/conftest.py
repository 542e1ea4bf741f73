import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

# filled by the acceptance suite; echoed after the run so the verdicts are visible
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
