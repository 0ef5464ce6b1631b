import pytest

# criterion id -> list of outcomes of the tests tagged with it
_CRITERIA: dict[str, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA.setdefault(str(marker.args[0]), []).append(report.outcome == "passed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")

    def key(c):
        return (int("".join(ch for ch in c if ch.isdigit())), c)

    for crit in sorted(_CRITERIA, key=key):
        ok = all(_CRITERIA[crit])
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'}")
