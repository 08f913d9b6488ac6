import pytest
from hypothesis import settings

from audiocd import kernels

settings.register_profile("default", max_examples=100, deadline=None)
settings.load_profile("default")

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    failed = rep.failed
    if rep.when == "call" or failed:
        prev = _CRITERIA.get(label, True)
        _CRITERIA[label] = prev and not failed and not rep.skipped


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_CRITERIA, key=lambda s: int(s.split()[0])):
        terminalreporter.write_line(f"{'PASS' if _CRITERIA[label] else 'FAIL'}  {label}")


@pytest.fixture(params=[kernels.NUMPY, kernels.NUMBA], ids=["numpy", "numba"])
def impl(request, monkeypatch):
    """Run a test once per kernel flavour by swapping the active namespace."""
    monkeypatch.setattr(kernels, "ACTIVE", request.param)
    return request.param
