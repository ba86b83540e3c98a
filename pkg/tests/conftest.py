import numpy as np
import pytest

from fedmmx import nam
from fedmmx.data import ModalDataset


def random_model(seed, C=3, dims=(("a", 2), ("b", 2)), H=4, scale=1.0):
    rng = np.random.default_rng(seed)
    layout = nam.Layout(tuple(dims), H, C)
    params = nam.NamParams(layout, scale * rng.standard_normal(layout.size))
    return params, rng


def random_batch(rng, layout, n=5, modalities=None):
    mods = modalities or layout.modality_ids
    feats = {m: rng.standard_normal((n, layout.dim(m))) for m in mods}
    return ModalDataset(feats, rng.integers(0, layout.num_classes, size=n))


def central_difference(fn, x, step=1e-5):
    """Gradient of scalar ``fn`` at ``x`` by central differences, coordinate by coordinate."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (fn(xp) - fn(xm)) / (2 * step)
    return g


@pytest.fixture
def tiny_model():
    return random_model(0)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results):
        terminalreporter.write_line(results[name])
