from __future__ import annotations

import numpy as np
import pytest

from cpmm.matnorm import TemporalCholesky, band_mask


def random_pd(rng: np.random.Generator, d: int, jitter: float = 0.5) -> np.ndarray:
    A = rng.normal(size=(d, d))
    return A @ A.T + jitter * np.eye(d)


def random_chol(rng: np.random.Generator, T: int, m: int) -> TemporalCholesky:
    U = np.eye(T) + np.tril(rng.normal(scale=0.4, size=(T, T)), -1) * band_mask(T, m)
    D = rng.uniform(0.3, 2.0, size=T)
    return TemporalCholesky(U, D, m)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
