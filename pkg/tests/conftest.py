"""Shared pytest wiring: the acceptance suite records one line per criterion
and this hook prints them as a summary section, visible regardless of
capture mode."""

_acceptance_lines = []


def record_acceptance(line: str):
    _acceptance_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
