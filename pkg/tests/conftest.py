import sys

import numpy as np
import pytest

from kpdnn.network import TRAIN, backward, forward, loss
from kpdnn.pfile import FrameTable
from kpdnn.rng import SeededRng

TABLE1 = [
    (0, 0, [0.2, 0.3, 0.5, 1.4, 1.8, 2.5], 10),
    (0, 1, [1.3, 2.1, 0.3, 0.1, 1.4, 0.9], 179),
    (1, 0, [0.3, 0.5, 0.5, 1.4, 0.8, 1.4], 32),
]


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def table1():
    return FrameTable([r[0] for r in TABLE1], [r[1] for r in TABLE1],
                      [r[2] for r in TABLE1], [r[3] for r in TABLE1])


def random_table(rng, n_utts, max_frames, dim, labels=True, num_labels=50):
    """Random archive content with float32-exact features."""
    lengths = [1 + int(u * max_frames) for u in rng.uniform(n_utts)]
    utt = np.repeat(np.arange(n_utts), lengths)
    frame = np.concatenate([np.arange(n) for n in lengths]) if n_utts else np.zeros(0)
    feats = rng.normal((len(utt), dim)).astype(np.float32).astype(np.float64)
    lab = (rng.uniform(len(utt)) * num_labels).astype(np.int64) if labels else None
    return FrameTable(utt, frame, feats, lab)


def numeric_gradient(f, param, step=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``param`` (in place)."""
    grad = np.zeros_like(param)
    flat = param.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(net, x, y, rng, step=1e-5):
    """Worst relative error between backprop and central differences, masks held fixed."""
    cache = forward(net, x, TRAIN, rng)
    grads = backward(net, cache, y)
    masks = cache.masks
    worst = 0.0
    for p, g in zip(net.parameters(), grads):
        num = numeric_gradient(lambda: loss(net, x, y, TRAIN, masks=masks), p, step)
        worst = max(worst, max_relative_error(g, num))
    return worst


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
