import numpy as np
import pytest

from ureca_forge.masks import BinaryMask

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            num, title = m.args
            _criteria.setdefault(num, {"title": title, "outcomes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        # an expected failure marks a check known to be unattainable, not a pass
        result = "xfail" if hasattr(rep, "wasxfail") else rep.passed
        _criteria[m.args[0]]["outcomes"].append(result)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        c = _criteria[num]
        res = c["outcomes"]
        passed = sum(r is True for r in res)
        known = sum(r == "xfail" for r in res)
        if not res:
            verdict = "NOT RUN"
        elif passed == len(res):
            verdict = "PASS"
        elif passed + known == len(res):
            verdict = "PARTIAL"
        else:
            verdict = "FAIL"
        note = f", {known} known unattainable" if known else ""
        terminalreporter.write_line(f"criterion {num}: {verdict}  {c['title']} ({passed}/{len(res)} checks{note})")


def random_mask(rng: np.random.Generator, w: int, h: int, density: float | None = None) -> BinaryMask:
    p = rng.uniform(0, 1) if density is None else density
    return BinaryMask(rng.random((h, w)) < p)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
