import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE = []


def record_acceptance(number: int, name: str, ok: bool, detail: str = ""):
    ACCEPTANCE.append((number, name, ok, detail))
    print(f"[acceptance {number}] {'PASS' if ok else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{number:2d}. {'PASS' if ok else 'FAIL'}  {name}  ({detail})")
