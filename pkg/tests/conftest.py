import numpy as np
import pytest

from m3impute.tensor import GradTape, Tensor


def numeric_grad(fn, arrays, h=1e-6):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            up = fn(*arrays)
            arr[idx] = old - h
            down = fn(*arrays)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    """Max-norm relative error, robust to entries that are exactly zero."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(build, arrays, h=1e-6):
    """Compare tape gradients of ``build(*tensors) -> scalar Tensor`` with finite differences.

    Returns the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(*arrs):
        with GradTape() as tape:
            tape.enabled = False
            return build(*[Tensor(a) for a in arrs]).item()

    with GradTape():
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        build(*tensors).backward()
    numeric = numeric_grad(value, arrays, h)
    return max(rel_error(t.grad, n) for t, n in zip(tensors, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def param_gradcheck(loss_fn, params, h=1e-6):
    """Finite-difference check of ``loss_fn() -> scalar Tensor`` against leaf ``params``.

    Parameters are perturbed in place, so the model under test needs no rebinding.
    """
    with GradTape():
        loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value(*_):
        with GradTape() as tape:
            tape.enabled = False
            return loss_fn().item()

    numeric = numeric_grad(value, [p.data for p in params], h)
    # One scale for the whole model: a parameter whose gradient is ~1e-8 would
    # otherwise be judged on finite-difference round-off alone.
    scale = max(max(np.abs(a).max(), np.abs(n).max()) for a, n in zip(analytic, numeric))
    worst = max(np.abs(a - n).max() for a, n in zip(analytic, numeric))
    return float(worst / max(scale, 1e-12))
