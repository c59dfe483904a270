import pytest

_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_KEY] = []


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return rep
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        status = "SKIP" if rep.skipped else ("PASS" if rep.passed else "FAIL")
        if rep.skipped and not detail and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2]
        item.config.stash[_KEY].append((marker.args[0], marker.args[1], status, detail))
    return rep


def pytest_terminal_summary(terminalreporter, config):
    rows = config.stash[_KEY]
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(rows, key=lambda r: str(r[0])):
        line = f"criterion {number} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
