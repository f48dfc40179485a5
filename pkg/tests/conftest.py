import numpy as np
import pytest

from crosspath.tensor import Tape, Tensor


def numeric_grad(f, arr, eps=1e-4):
    """Central differences of scalar f() w.r.t. every entry of arr (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    for i in np.ndindex(arr.shape):
        orig = arr[i]
        arr[i] = orig + eps
        up = f()
        arr[i] = orig - eps
        down = f()
        arr[i] = orig
        g[i] = (up - down) / (2 * eps)
    return g


def analytic_grads(build, *arrays):
    """Run build(*tensors) -> scalar under a tape; return grads of each input."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*leaves)
    tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]


def max_rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
