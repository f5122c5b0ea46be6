import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import gate  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if not gate.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(gate.VERDICTS):
        ok, detail = gate.VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
