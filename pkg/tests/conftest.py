from __future__ import annotations

import math

import numpy as np
import pytest


def erf_inverse_quantile(p, lo=-40.0, hi=40.0):
    """Standard normal quantile by bisection on erfc, used as an independent oracle."""
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * math.erfc(-mid / math.sqrt(2)) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
