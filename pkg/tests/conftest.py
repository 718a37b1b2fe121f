import numpy as np
import pytest

from snp.backend import ToyBackend, ToyBackendSpec

SMALL_SPEC = ToyBackendSpec(seed=7, latent_shape=(4, 16, 16), widths=(8, 8, 16, 16), emb_dim=8, condition_scale=4)


@pytest.fixture(scope="session")
def toy():
    return ToyBackend()


@pytest.fixture(scope="session")
def small():
    return ToyBackend(SMALL_SPEC)


def step_depth(shape, col):
    d = np.zeros(shape)
    d[:, col:] = 1.0
    return d


def blob_depth(shape, seed=0):
    """Smooth object-like depth: a bright ellipse on a ramp background."""
    h, w = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(0.35, 0.65) * h, rng.uniform(0.35, 0.65) * w
    ry, rx = rng.uniform(0.15, 0.3) * h, rng.uniform(0.15, 0.3) * w
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return np.where(inside, 0.9, 0.2 * xx / w)


@pytest.fixture
def small_inputs(small):
    rng = np.random.default_rng(3)
    z = rng.standard_normal((1, *small.latent_shape))
    depth = blob_depth(small.condition_shape)
    pos = small.encode_prompt("a pig standing in a field")
    neg = small.encode_prompt("blurry, low quality")
    return z, depth, pos, neg


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in RESULTS:
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{status}  {name}: {detail}")
