import numpy as np
import pytest

import nullfiber as nf


def level_curve_closed_form(x):
    """ln(1 + (1 + e^{2 x0 + x1})^4), the level-curve example network written out by hand."""
    x = np.asarray(x, dtype=float)
    u = 2 * x[..., 0] + x[..., 1]
    return np.log1p((1 + np.exp(u)) ** 4)


def angle_to(v, ref):
    """Angle between the lines spanned by v and ref (stable for tiny angles)."""
    v = np.asarray(v, float) / np.linalg.norm(v)
    ref = np.asarray(ref, float) / np.linalg.norm(ref)
    c = float(v @ ref)
    return float(np.arctan2(np.linalg.norm(v - c * ref), abs(c)))


@pytest.fixture(scope="session")
def linear_net():
    return nf.load_fixture("linear_kernel")


@pytest.fixture(scope="session")
def level_net():
    return nf.load_fixture("level_curves")


@pytest.fixture(scope="session")
def weight_net():
    return nf.load_fixture("weight_space")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_dims(rng, max_layers=4, max_width=6, min_layers=2):
    n = int(rng.integers(min_layers, max_layers + 1))
    return [int(d) for d in rng.integers(1, max_width + 1, size=n + 1)]


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
