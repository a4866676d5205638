"""Shared pytest wiring.

Acceptance tests append one verdict line per criterion; printing them from
the terminal-summary hook keeps them visible despite output capture.
"""

verdict_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if verdict_lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in verdict_lines:
            terminalreporter.write_line(line)
