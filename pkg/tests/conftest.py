"""Shared pytest wiring: a summary block for the end-to-end gates.

test_acceptance.py appends one line per gate to ACCEPTANCE_LINES; printing
them from the terminal-summary hook keeps them visible in a plain
``pytest -v`` run, where per-test stdout is swallowed for passing tests.
"""

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
