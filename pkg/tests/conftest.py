import numpy as np
import pytest

from fairdefer.data import Dataset
from fairdefer.nn_core import Batch, HeadKind, init_params


def random_batch(rng, n=16, d=3, with_dm=True):
    """A batch whose four (A, Y) cells each hold at least two examples."""
    y = np.array([0, 0, 1, 1] * (n // 4) + list(rng.integers(0, 2, n % 4)))
    a = np.array([0, 1] * (n // 2) + list(rng.integers(0, 2, n % 2)))
    perm = rng.permutation(n)
    y, a = y[perm], a[perm]
    x = rng.normal(size=(n, d))
    dm = rng.uniform(0.05, 0.95, n) if with_dm else None
    return Batch(x, y, a, dm_prob=dm)


def random_params(rng, d, head_kind, hidden=4, scale=0.8):
    p = init_params(d, hidden, head_kind, int(rng.integers(1 << 30)))
    flat = p.flatten() + scale * rng.normal(size=p.size)
    if head_kind is HeadKind.ORDINAL:
        # keep the band non-trivial: t0 near -0.5, gap of order one
        flat[-2:] = [rng.normal(0, 0.3) - 0.5, rng.normal(0.5, 0.3)]
    return p.with_flat(flat)


def central_difference(f, theta, h=1e-5):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def rel_err(g, ref):
    return np.linalg.norm(g - ref) / max(np.linalg.norm(g), np.linalg.norm(ref), 1e-12)


def tiny_dataset(n=40, seed=0, with_z=True):
    rng = np.random.default_rng(seed)
    y = np.tile([0, 1], n // 2)
    a = np.repeat([0, 1], n // 2)
    x = rng.normal(size=(n, 2)) + y[:, None]
    z = y[:, None].astype(float) if with_z else None
    aux = np.tile([0, 0, 1, 1], n // 4)
    return Dataset(x, y, a, z, aux, np.array([f"e{i}" for i in range(n)]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance results, one line per criterion, echoed at the end of the run.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
