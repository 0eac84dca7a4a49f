import sys

import numpy as np
import pytest


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_fd(f, x, index, h):
    """Central difference of scalar ``f`` with respect to ``x[index]`` (in place, restored)."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * h)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def active_velocity_params(net, seed=0):
    """Velocity network parameters with the zero-initialized output layer randomized,
    so every block receives a non-zero gradient."""
    params = net.init_params(seed)
    r = np.random.default_rng(seed + 1)
    params["lin2.w"] = 0.5 * r.standard_normal(params["lin2.w"].shape)
    params["lin2.b"] = 0.5 * r.standard_normal(params["lin2.b"].shape)
    return params


def fd_check_params(f, params, grads, count, rng, h=1e-6, min_scale=1e-3):
    """Largest relative error between ``grads`` and central differences of ``f`` over
    ``count`` parameters drawn among entries whose gradient exceeds ``min_scale`` times
    the largest entry."""
    keys = list(params.keys())
    top = max(np.max(np.abs(grads[k])) for k in keys)
    pool = [(k, idx) for k in keys for idx in zip(*np.nonzero(np.abs(grads[k]) > min_scale * top))]
    picks = rng.choice(len(pool), size=min(count, len(pool)), replace=False)
    worst = 0.0
    for i in picks:
        k, idx = pool[i]
        fd = central_fd(f, params.blocks[k], idx, h)
        worst = max(worst, float(rel_err(grads[k][idx], fd)))
    return worst


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
