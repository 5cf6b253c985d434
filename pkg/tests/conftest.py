import numpy as np
import pytest

from ftimexer.model import FTimeXer, ModelConfig

ACCEPTANCE = []  # PASS/FAIL lines from test_acceptance, echoed in the summary

TINY = dict(n_endo=1, n_exo=2, lookback=4, patch_len=2, d_model=8, n_layers=1, n_heads=2)


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f()`` with respect to array ``x`` (edited in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a)), np.max(np.abs(b))))


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_cfg):
    return FTimeXer(tiny_cfg, seed=0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
