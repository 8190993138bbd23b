import numpy as np
import pytest

from hetcd.cae import CaeConfig, train_cae, translate
from hetcd.raster import normalize_raster
from hetcd.synth import SynthConfig, generate_synthetic_pair

# Reduced CAE schedule so the suite runs on one CPU core in minutes; the
# CLI and library default to the full schedule.
FAST_CAE = CaeConfig(epochs=3, batches_per_epoch=100, hidden_channels=16, seed=0)


@pytest.fixture(scope="session")
def bundle():
    return generate_synthetic_pair(SynthConfig())


@pytest.fixture(scope="session")
def normalized(bundle):
    return normalize_raster(bundle.t1), normalize_raster(bundle.t2)


@pytest.fixture(scope="session")
def trained_cae(normalized):
    x, y = normalized
    return train_cae(x, y, FAST_CAE)


@pytest.fixture(scope="session")
def translation(trained_cae, normalized):
    return translate(trained_cae, *normalized)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------------- acceptance report
#
# Tests marked `criterion(n)` feed a per-criterion PASS/FAIL/SKIP line that
# is printed at the end of the run, with any detail the test recorded.

_RANK = {"passed": 0, "skipped": 1, "failed": 2}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    entry = item.config._acceptance.setdefault(marker.args[0], {"outcome": "passed", "detail": []})
    if _RANK[rep.outcome] > _RANK[entry["outcome"]]:
        entry["outcome"] = rep.outcome
    if rep.skipped and isinstance(rep.longrepr, tuple):
        entry["detail"].append(rep.longrepr[2].removeprefix("Skipped: "))


@pytest.fixture
def acceptance(request):
    """Record a detail string for the current test's criterion."""
    n = request.node.get_closest_marker("criterion").args[0]

    def note(text: str) -> None:
        request.config._acceptance.setdefault(n, {"outcome": "passed", "detail": []})["detail"].append(text)

    return note


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    label = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    for n in sorted(results):
        r = results[n]
        terminalreporter.write_line(f"criterion {n}: {label[r['outcome']]}  {'; '.join(dict.fromkeys(r['detail']))}".rstrip())
