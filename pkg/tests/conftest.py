import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import RESULTS  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS):
        ok, name, detail = RESULTS[key]
        terminalreporter.write_line(f"criterion {key} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
