import numpy as np
import pytest

from rdmm.fields import GridSpec
from rdmm.kernels import gauss_conv, normalize_preweights


def smooth_field(rng, shape, sigma=0.08, amplitude=1.0):
    """Random smooth field with max magnitude ``amplitude`` (trailing two axes spatial)."""
    f = gauss_conv(rng.standard_normal(shape), sigma, ndim=2)
    return amplitude * f / np.max(np.abs(f))


def bump(grid, center, width=0.1):
    """Gaussian bump sampled on ``grid``, vanishing (numerically) at the border."""
    x = grid.coordinates()
    c = np.asarray(center, dtype=float).reshape((-1,) + (1,) * grid.ndim)
    return np.exp(-np.sum((x - c) ** 2, axis=0) / (2 * width**2))


def compact_momentum(rng, grid, amplitude=0.05, sigma=0.06):
    """Smooth momentum that vanishes near the boundary of the unit square."""
    window = bump(grid, [0.5] * grid.ndim, 0.15)
    m = smooth_field(rng, (grid.ndim,) + grid.dims, sigma) * window
    return amplitude * m / np.max(np.abs(m))


def nonuniform_preweights(rng, grid, n_kernels=4, amplitude=0.5):
    base = np.full((n_kernels,) + grid.dims, 1.0)
    return normalize_preweights(np.abs(base + smooth_field(rng, base.shape, 0.1, amplitude)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def grid33():
    return GridSpec((33, 33))


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line, echo it, then assert the outcome."""

    def record(number, title, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
