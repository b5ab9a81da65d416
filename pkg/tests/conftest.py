import numpy as np
import pytest

from phylomds.core import DissimilarityData, LatentConfiguration

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): release criterion reported in the terminal summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    name = marker.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if hasattr(report, "wasxfail"):
        # a known, ledgered shortfall: report it as a failure, not as N/A
        _ACCEPTANCE[name] = ("FAIL", f"{detail}; known: {report.wasxfail}")
    elif report.skipped:
        reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        _ACCEPTANCE[name] = ("N/A", reason.removeprefix("Skipped: "))
    elif report.when == "call":
        _ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", detail)
    elif report.failed:
        _ACCEPTANCE[name] = ("FAIL", f"error during {report.when}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{status:4s}  {name}" + (f"  [{detail}]" if detail else ""))


def random_instance(rng, n, d, observed_fraction=1.0, sigma2=None):
    """Dissimilarities from a perturbed Gaussian configuration plus an evaluation point."""
    truth = rng.standard_normal((n, d))
    dist = LatentConfiguration(truth).distances()
    noise = np.abs(dist + 0.3 * rng.standard_normal((n, n)))
    y = np.tril(noise, -1)
    y = y + y.T
    mask = ~np.eye(n, dtype=bool)
    if observed_fraction < 1.0:
        keep = np.tril(rng.random((n, n)) < observed_fraction, -1)
        mask = keep | keep.T
    data = DissimilarityData(y, mask)
    x = truth + 0.2 * rng.standard_normal((n, d))
    if sigma2 is None:
        sigma2 = float(rng.uniform(0.2, 2.0))
    return data, x, sigma2


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
