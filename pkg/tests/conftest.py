from fractions import Fraction

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def brute_ranks(s):
    """Rank by direct counting: smaller values first; among equals the
    earlier index ranks higher."""
    s = np.asarray(s, dtype=np.float64)
    idx = np.arange(s.size)
    smaller = s[None, :] < s[:, None]
    later_tie = (s[None, :] == s[:, None]) & (idx[None, :] > idx[:, None])
    return (1 + smaller.sum(axis=1) + later_tie.sum(axis=1)).tolist()


def brute_gini(y, yhat):
    """The normalized Gini ratio evaluated term by term in exact rationals."""
    y = [Fraction(float(v)) for v in y]
    n = len(y)
    total = sum(y)
    base = sum(Fraction(n - i + 1, n) for i in range(1, n + 1))
    num = sum(a * r for a, r in zip(y, brute_ranks(yhat))) / total - base
    den = sum(a * r for a, r in zip(y, brute_ranks([float(v) for v in y]))) / total - base
    return float(num / den)


def claim_like(rng, n, zero_frac=0.8):
    """Nonnegative responses with a point mass at zero and a skewed tail."""
    y = rng.gamma(0.7, 1000.0, size=n)
    y[rng.random(n) < zero_frac] = 0.0
    if not y.any():
        y[rng.integers(n)] = 1.0
    return y


# Acceptance outcomes, filled by tests/test_acceptance.py and printed once
# at the end of the session.
ACCEPTANCE = {}


def record_acceptance(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
