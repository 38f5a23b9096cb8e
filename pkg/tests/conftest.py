"""Collects one verdict line per acceptance criterion and prints them at the end."""

VERDICTS: list[tuple[str, bool | None, str]] = []


def record(criterion: str, passed: bool | None, detail: str = "") -> bool | None:
    """Log a verdict; ``None`` marks a criterion that could not be run."""
    VERDICTS.append((criterion, None if passed is None else bool(passed), detail))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in VERDICTS:
        terminalreporter.write_line(f"{'SKIP' if ok is None else 'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
