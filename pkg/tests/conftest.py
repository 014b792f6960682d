import pytest

CRITERIA = {
    1: "gradient suite",
    2: "loss arithmetic",
    3: "shape and structure suite",
    4: "supervised degenerate convergence",
    5: "adversarial smoke run",
    6: "determinism and resume",
    7: "checkpoint roundtrip",
    8: "pyramid and data suite",
    9: "comparative report (non-gating)",
}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")
    config._criteria = {}
    config._acceptance_notes = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    results = item.config._criteria.setdefault(mark.args[0], [])
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        results.append((item.name, rep.passed))


@pytest.fixture
def acceptance_note(request):
    return request.config._acceptance_notes.append


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not config._criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(config._criteria):
        results = config._criteria[n]
        ok = all(passed for _, passed in results)
        failed = [name for name, passed in results if not passed]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {CRITERIA.get(n, '')} ({len(results)} tests)"
        if failed:
            line += "  failing: " + ", ".join(failed)
        tr.write_line(line)
    for note in config._acceptance_notes:
        tr.write_line(note)
