import math

import numpy as np
import pytest

from robust_funreg.data import Curve, LongitudinalSample
from robust_funreg.fpca import ScoreSet


def sine(k):
    return lambda s: math.sqrt(2.0) * np.sin(k * math.pi * np.asarray(s))


def gaussian_sample(rng, n, m, lam=(1.0, 0.5), sigma=0.1, grid=None, mean=None):
    """Curves ``mean + sum_k z_k sqrt(lam_k) phi_k + noise`` with sine components.

    Returns the sample and the true score matrix.
    """
    lam = np.asarray(lam, dtype=float)
    U = rng.standard_normal((n, lam.size)) * np.sqrt(lam)
    curves = []
    for i in range(n):
        t = np.sort(rng.uniform(0, 1, m)) if grid is None else np.asarray(grid, dtype=float)
        x = sum(U[i, k] * sine(k + 1)(t) for k in range(lam.size))
        if mean is not None:
            x = x + mean(t)
        x = x + sigma * rng.standard_normal(t.size)
        curves.append(Curve(str(i), t, x))
    return LongitudinalSample(tuple(curves), (0.0, 1.0)), U


def random_scores(rng, n=60, p=2, q=2, theta=None, df=None, lam=None):
    lam = np.ones(p) if lam is None else np.asarray(lam, dtype=float)
    U = rng.standard_normal((n, p)) * np.sqrt(lam)
    Theta = rng.standard_normal((p, q)) if theta is None else np.asarray(theta, dtype=float)
    W = rng.standard_t(df, (n, q)) if df else rng.standard_normal((n, q))
    return ScoreSet.from_scores(U, U @ Theta + W, lam, [str(i) for i in range(n)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def acceptance_log(request):
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(label, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
