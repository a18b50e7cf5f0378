"""Shared pytest hooks: echo acceptance criterion verdicts after the run."""

_criterion_lines: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    verdict = "PASS" if passed else "FAIL"
    line = f"criterion {number}: {verdict} - {detail}"
    _criterion_lines.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _criterion_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_criterion_lines):
        terminalreporter.write_line(line)
