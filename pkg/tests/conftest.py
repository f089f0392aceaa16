import numpy as np
import pytest

from adamatting import tensor as T
from adamatting.model import MattingModel, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body with float64 as the default dtype."""
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def small_model():
    return MattingModel(ModelConfig.small(seed=7))


def param(a, dtype=np.float64):
    return T.Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


# -- acceptance reporting ----------------------------------------------------------
# Tests marked ``criterion(n, title)`` contribute to one PASS/FAIL line per
# criterion, printed at the end of the run with any values they recorded.
_CRITERIA: dict[int, dict] = {}


def _entry(n: int, title: str = "") -> dict:
    return _CRITERIA.setdefault(n, {"title": title, "status": "PASS", "notes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    entry = _entry(mark.args[0], mark.args[1] if len(mark.args) > 1 else "")
    if rep.failed or (rep.when == "call" and rep.skipped):
        entry["status"] = "FAIL" if rep.failed else "SKIP"


@pytest.fixture
def record(request):
    """Attach a measured value to the current test's criterion line."""
    mark = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        _entry(mark.args[0], mark.args[1] if len(mark.args) > 1 else "")["notes"].append(text)
    return add


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {e['status']}: {e['title']}")
        for note in e["notes"]:
            terminalreporter.write_line(f"    {note}")
