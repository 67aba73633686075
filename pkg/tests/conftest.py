from __future__ import annotations

import numpy as np
import pytest

from reworkd.data_model import Dataset, fit_pca, subsample_overlap
from reworkd.simulator import SimConfig, simulate


def make_dataset(n: int = 40, k: int = 36, seed: int = 0, treatment=None, yield_frac=None, invalid_rate=0.0):
    """Small random dataset with a fitted PCA."""
    rng = np.random.default_rng(seed)
    cx = 330 + rng.normal(size=(n, k))
    cy = 340 + 0.5 * cx + rng.normal(scale=0.3, size=(n, k))
    invalid = rng.random((n, k)) < invalid_rate
    invalid[:, 0] = False
    a = rng.integers(0, 2, n) if treatment is None else np.asarray(treatment)
    if a.min() == a.max() and treatment is None:
        a[0], a[1] = 0, 1
    y = rng.random(n) if yield_frac is None else np.asarray(yield_frac, dtype=float)
    w = rng.poisson(40, n).astype(float)
    d = Dataset(cx, cy, invalid, w, a, y)
    return d.with_pca(fit_pca(d.mean_points, d.treatment))


@pytest.fixture(scope="session")
def sim_small():
    """Default simulator at n=3000, before subsampling."""
    return simulate(SimConfig(n_lots=3000, seed=11))


@pytest.fixture(scope="session")
def sim_small_sub(sim_small):
    d, oracle = sim_small
    sub, _ = subsample_overlap(d)
    return sub, oracle


@pytest.fixture(scope="session")
def sim_default():
    """Default simulator config (n=20000)."""
    return simulate(SimConfig(seed=3))


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES: list[str] = []


class _Criterion:
    def __init__(self, reporter, tag: str, title: str):
        self.reporter, self.tag, self.title = reporter, tag, title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"{self.tag} {status} {self.title}"
        if self.details:
            line += " | " + "; ".join(self.details)
        if exc_type is not None and exc_type is not AssertionError:
            line += f" | {exc_type.__name__}: {exc}"
        ACCEPTANCE_LINES.append(line)
        if self.reporter is not None:
            self.reporter.write_line("")
            self.reporter.write_line(line)
        return False


@pytest.fixture
def criterion(request):
    """Context manager that prints one pass/fail line for an acceptance criterion."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    return lambda tag, title: _Criterion(reporter, tag, title)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
