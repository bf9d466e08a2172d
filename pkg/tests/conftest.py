"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
