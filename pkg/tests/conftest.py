"""Shared pytest wiring: the acceptance summary printed after the run."""

ACCEPTANCE = {}


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {key}: {status}  {detail}")
