import numpy as np
import pytest

from palletscan.synth import generate_dataset
from palletscan.workflow import classifier_inputs


@pytest.fixture(scope="session")
def small_frames():
    """100 pallet + 100 empty synthetic frames."""
    return generate_dataset(100, 100, seed=11)


@pytest.fixture(scope="session")
def small_set(small_frames):
    images, labels = classifier_inputs(small_frames)
    return images, labels


@pytest.fixture
def toy_set():
    """Tiny separable 8x8 problem: a lit top-left block marks class 1."""
    rng = np.random.default_rng(0)
    x = (rng.random((40, 8, 8)) < 0.05).astype(float)
    y = np.arange(40) % 2
    x[y == 1, 1:4, 1:4] = 1.0
    return x, y


_criteria: dict[int, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call" and report.passed:
        return
    _criteria.setdefault(marker.args[0], []).append("PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        verdict = "PASS" if all(v == "PASS" for v in _criteria[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}")
