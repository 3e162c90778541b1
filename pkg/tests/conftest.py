import numpy as np
import pytest

from ride_lab.experts import build_model


def small_model(n_experts=2, c=4, d_in=5, hidden=(6, 5), seed=0, cosine_scale=None, dtype=np.float64):
    return build_model(d_in, hidden, n_experts, 1.0, c, seed, cosine_scale=cosine_scale, dtype=dtype)


def batch(seed, b=4, d=5, c=4):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((b, d)), rng.integers(0, c, size=b)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, filled by tests/test_acceptance.py and printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
