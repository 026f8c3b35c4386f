import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("evrec", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("evrec")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_opinion_arrays(rng, k, n=None, dogmatic=False):
    """Random valid (beliefs, u); ``n`` gives a batch."""
    shape = (k + 1,) if n is None else (n, k + 1)
    w = rng.dirichlet(np.ones(k + 1), size=None if n is None else n).reshape(shape)
    if dogmatic:
        w[..., -1] = 0.0
        w = w / w.sum(axis=-1, keepdims=True)
    return w[..., :k], w[..., k]


_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one acceptance line: criterion(n, passed, details)."""
    def record(n, passed, details):
        _CRITERIA[n] = (bool(passed), details)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, details = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {details}")
