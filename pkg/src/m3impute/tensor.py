"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation on tensors that require gradients appends a node to the
active :class:`GradTape`. Because nodes are appended in execution order the
tape is already topologically sorted, so :meth:`GradTape.backward` is a single
reverse sweep.

>>> x = Tensor([3.0], requires_grad=True)
>>> (x * x).sum().backward()
>>> x.grad
array([6.])
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

from .exceptions import ContractError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "GradTape",
    "Adam",
    "no_grad",
    "detect_anomaly",
    "active_tape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "hadamard",
    "matmul",
    "linear",
    "concat",
    "take",
    "segment_mean",
    "relu",
    "gelu",
    "l2_normalize",
    "softmax",
    "gamma_act",
    "mse_loss",
    "ce_loss",
    "uniform_init",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_CHECK_FINITE = False
_BELOW_ONE = np.nextafter(1.0, 0.0)


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradTape:
    """Ordered record of differentiable operations.

    A tape becomes the active recorder while used as a context manager;
    otherwise a process-wide default tape is used.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def clear(self):
        for node in self.nodes:
            node.out.grad = None
        self.nodes.clear()

    def backward(self, loss: "Tensor"):
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ContractError("loss does not depend on any tensor requiring grad")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            out = node.out
            g = out.grad
            if g is None:
                continue
            out.grad = None
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
        self.nodes.clear()


_TAPES: list[GradTape] = [GradTape()]


def active_tape() -> GradTape:
    return _TAPES[-1]


@contextlib.contextmanager
def no_grad():
    """Disable recording on the active tape."""
    tape = active_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


@contextlib.contextmanager
def detect_anomaly():
    """Raise ``FloatingPointError`` as soon as an op produces NaN or Inf."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = True
    try:
        yield
    finally:
        _CHECK_FINITE = previous


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        active_tape().backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced by a tensor op")
    tape = _TAPES[-1]
    if tape.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, parents, backward))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward)


def hadamard(a, b) -> Tensor:
    """Elementwise product of two tensors of identical shape."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    return mul(a, b)


def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b`` where ``b`` is 2-D and ``a`` is (..., k)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = ad.reshape(-1, bd.shape[0]).T @ g.reshape(-1, bd.shape[1])
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` recorded as a single node."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"linear: cannot apply weight {weight.shape} and bias {bias.shape} to {x.shape}"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd
    out += bias.data

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, wd.shape[0]).T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def concat(parts: Sequence, axis=0) -> Tensor:
    """Concatenate tensors along ``axis``; other dimensions must agree."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    ndim = parts[0].ndim
    ax = axis % ndim if ndim else 0
    for p in parts[1:]:
        if p.ndim != ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise DimensionError(
                f"concat: incompatible shapes {[q.shape for q in parts]} on axis {axis}"
            )
    if len(parts) == 1:
        return parts[0]
    sizes = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _result(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), backward)


def _selection_matrix(index, n_rows):
    flat = np.asarray(index).reshape(-1)
    ones = np.ones(flat.size)
    return sp.csr_matrix((ones, (flat, np.arange(flat.size))), shape=(n_rows, flat.size))


def take(a, index) -> Tensor:
    """Gather rows: ``out[i...] = a[index[i...]]``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def backward(g):
        rows = _selection_matrix(index, shape[0])
        flat = rows @ g.reshape(index.size, -1)
        return (np.asarray(flat).reshape(shape),)

    return _result(a.data[index], (a,), backward)


def segment_mean(a, segments, num_segments) -> Tensor:
    """Mean of the rows of ``a`` grouped by ``segments``; empty groups give 0."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.intp)
    if a.ndim != 2 or segments.shape != (a.shape[0],):
        raise DimensionError(f"segment_mean: rows {a.shape} vs segment ids {segments.shape}")
    counts = np.bincount(segments, minlength=num_segments).astype(np.float64)
    weights = 1.0 / counts[segments] if segments.size else np.zeros(0)
    op = sp.csr_matrix(
        (weights, (segments, np.arange(segments.size))), shape=(num_segments, segments.size)
    )
    op_t = op.T.tocsr()
    return _result(np.asarray(op @ a.data), (a,), lambda g: (np.asarray(op_t @ g),))


# ------------------------------------------------------------- activations


def relu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),))


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the normal CDF evaluated through erf."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _result(xd * cdf, (x,), backward)


def l2_normalize(x, eps=1e-12) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm; all-zero rows stay zero."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    scale = 1.0 / np.maximum(norm, eps)
    y = xd * scale

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) * scale,)

    return _result(y, (x,), backward)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward)


def gamma_act(x) -> Tensor:
    """``1 - exp(-|x|)``, a bounded activation with range [0, 1)."""
    x = as_tensor(x)
    xd = x.data
    decay = np.exp(-np.abs(xd))
    # 1 - exp(-|x|) rounds to exactly 1.0 once |x| exceeds ~37
    out = np.minimum(1.0 - decay, _BELOW_ONE)
    return _result(out, (x,), lambda g: (g * np.sign(xd) * decay,))


# ------------------------------------------------------------------ losses


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = max(diff.size, 1)

    def backward(g):
        gp = g * (2.0 / n) * diff
        return gp, -gp

    return _result(np.asarray(np.mean(diff * diff)), (pred, target), backward)


def ce_loss(logits, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` (n x C) against integer class labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"ce_loss: logits {logits.shape} vs labels {labels.shape}")
    n, n_classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(f"ce_loss: labels must lie in [0, {n_classes})")
    labels = labels.astype(np.intp)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    rows = np.arange(n)
    value = -log_probs[rows, labels].mean() if n else 0.0

    def backward(g):
        grad = e / denom
        grad[rows, labels] -= 1.0
        return (grad * (g / max(n, 1)),)

    return _result(np.asarray(value), (logits,), backward)


# ------------------------------------------------------------- parameters


def uniform_init(rng: np.random.Generator, shape, fan_in: int, name=None) -> Tensor:
    """Weight drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Adam:
    """Adam with bias correction.

    Parameters
    ----------
    params : iterable of Tensor
        Leaf tensors to update in place.
    lr, beta1, beta2, eps : float
        The usual Adam hyperparameters.
    """

    def __init__(self, params: Iterable[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        missing = [p.name or i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for parameters {missing}; call backward first")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None
