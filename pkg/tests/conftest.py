"""Collects ``@pytest.mark.criterion`` outcomes and prints one line per criterion."""

import pytest

_RESULTS: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): test backs the named acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    # a failing fixture counts against the criterion as well
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        entry = _RESULTS.setdefault(mark.args[0], [True, []])
        entry[0] = entry[0] and rep.passed
        entry[1].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, (ok, details) in _RESULTS.items():
        tail = f" ({'; '.join(details)})" if details else ""
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}{tail}")
