import acceptance_support


def pytest_terminal_summary(terminalreporter):
    if acceptance_support.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_support.VERDICTS:
            terminalreporter.write_line(line)
