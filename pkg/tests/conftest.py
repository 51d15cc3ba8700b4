import sys


def pytest_terminal_summary(terminalreporter):
    # scoreboard collected by test_acceptance; capture-proof, one line
    # per criterion, failures included
    mod = sys.modules.get("test_acceptance")
    rows = getattr(mod, "VERDICTS", []) if mod else []
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(rows):
        terminalreporter.write_line(
            f"[{'PASS' if ok else 'FAIL'}] criterion {num:2d}: {detail}")
