# criterion label -> (passed, detail), filled by test_acceptance
VERDICTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance")
    for label, (ok, detail) in VERDICTS.items():
        terminalreporter.write_line(f"{label}: {'PASS' if ok else 'FAIL'} ({detail})")
