import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20190426)


def random_psd2(rng):
    """A random 2x2 PSD covariance as (s11, s12, s22)."""
    A = rng.standard_normal((2, 2)) * rng.uniform(0.2, 3.0)
    S = A @ A.T
    return S[0, 0], S[0, 1], S[1, 1]


_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL/SKIP line for an acceptance criterion, then assert it."""
    lines = request.config.stash[_VERDICTS]

    def record(label, ok, detail, skipped=False):
        status = "SKIP" if skipped else ("PASS" if ok else "FAIL")
        line = f"criterion {label}: {status}  {detail}"
        lines[label] = line
        print(line)
        if skipped:
            pytest.skip(detail)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines.values():
            terminalreporter.write_line(line)
