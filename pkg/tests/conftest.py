import numpy as np
import pytest

from cycledepth.autodiff import Tensor, backward


def fd_grad(fn, arrays, key, h=1e-5):
    """Central differences of the scalar ``fn(arrays)`` w.r.t. ``arrays[key]``."""
    x = arrays[key]
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(arrays)
        flat[i] = old - h
        down = fn(arrays)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def analytic_grad(build, arrays):
    """Run ``build`` on leaf tensors built from ``arrays`` and backprop."""
    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    loss = build(leaves)
    backward(loss)
    return {k: t.grad for k, t in leaves.items()}


def assert_fd_close(build, arrays, rtol=1e-4, floor=1e-8):
    grads = analytic_grad(build, arrays)

    def value(arrs):
        return build({k: Tensor(v) for k, v in arrs.items()}).item()

    for key in arrays:
        fd = fd_grad(value, arrays, key)
        a = grads[key] if grads[key] is not None else np.zeros_like(fd)
        mask = np.abs(fd) > floor
        rel = np.abs(a - fd)[mask] / np.abs(fd)[mask]
        assert rel.size == 0 or rel.max() < rtol, f"{key}: max rel err {rel.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
