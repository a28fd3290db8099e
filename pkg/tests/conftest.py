import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# filled by the acceptance tests, printed once at the end of the session
CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
