import numpy as np
import pytest

from modtune import autodiff as ad
from modtune.model import ModelConfig, init_model

SMALL = ModelConfig(vocab_size=23, d_model=16, n_layers=4, n_heads=2, d_ff=32, max_seq_len=12, seed=3)


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_model():
    return init_model(SMALL, dtype=np.float64)


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of ``x`` (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def grad_of(build, *tensors):
    with ad.Tape():
        loss = build()
    ad.backward(loss)
    return [t.grad.copy() for t in tensors]


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.report_lines():
        terminalreporter.write_line(line)
