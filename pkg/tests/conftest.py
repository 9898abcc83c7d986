import numpy as np
import pytest

from superkernel.tensor import Tape, Tensor, precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision("f64"):
        yield


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar f with respect to array x (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max(initial=0.0) / max(np.abs(b).max(initial=0.0), 1e-8))


def gradcheck(fn, *arrays, h: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences over all inputs."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*leaves)
    grads = tape.backward(loss, wrt=leaves)
    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(lambda: fn(*leaves).item(), leaf.data, h)
        worst = max(worst, rel_err(grads[leaf], num))
    return worst
