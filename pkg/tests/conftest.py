import acceptance_log


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in acceptance_log.RESULTS:
        terminalreporter.write_line(f"{status:<4}  {name}: {detail}")
