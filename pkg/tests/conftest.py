import pytest

# (number, title) -> list of (phase, outcome, seconds)
_criteria: dict[tuple[int, str], list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        _criteria.setdefault(tuple(marker.args), []).append((rep.when, rep.outcome, rep.duration))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), phases in sorted(_criteria.items()):
        ran = any(when == "call" for when, _, _ in phases)
        ok = ran and all(o == "passed" for _, o, _ in phases)
        seconds = sum(d for when, _, d in phases if when == "call")
        terminalreporter.write_line(
            f"criterion {number:2d}  {'PASS' if ok else 'FAIL'}  {title}  ({seconds:.1f} s)")
