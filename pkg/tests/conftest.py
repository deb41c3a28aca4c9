import sys


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end run (deselect with -m 'not slow')")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results):
            terminalreporter.write_line(line)
