"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

The engine is deliberately small: just the operations a single cross-attention
layer and a tiny causal decoder need.  Every op records its parents and a
closure that pushes the upstream gradient back into them.
"""

from __future__ import annotations

import contextlib
import math
import threading

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "count_flops",
    "matmul",
    "add",
    "mul",
    "scale",
    "transpose",
    "reshape",
    "take_rows",
    "getitem",
    "concat",
    "softmax",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "embedding",
    "sum_all",
    "adam_step",
    "Adam",
    "numerical_grad",
    "relative_error",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_STATE = threading.local()
_FLOP_COUNTERS: list[list[int]] = []


def _grad_enabled():
    return getattr(_STATE, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in this thread (evaluation only)."""
    prev = _grad_enabled()
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


@contextlib.contextmanager
def count_flops():
    """Count forward matmul FLOPs (2 per multiply-accumulate) inside the block.

    Yields a one-element list whose entry is updated in place.
    """
    counter = [0]
    _FLOP_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _FLOP_COUNTERS.remove(counter)


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None
        self.op = _op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def backward(self, grad=None):
        """Backpropagate from this tensor; leaves accumulate into ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        # intermediate buffers are per-pass; leaves keep accumulating
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data, parents, op, backward):
    req = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=parents if req else (), _op=op)
    if req:
        out._backward = backward
    return out


def matmul(a, b, row_stable=False):
    """Matrix product over the last two axes; leading axes broadcast.

    With ``row_stable`` every output row is produced by an identically shaped
    1-row product, so row ``i`` is bit-identical no matter how many rows ``a``
    has.  BLAS picks different kernels for different row counts otherwise.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if row_stable:
        data = np.matmul(a.data[..., :, None, :], np.expand_dims(b.data, -3))[..., 0, :]
    elif b.ndim == 2:
        # fold the batch into rows: one gemm instead of a broadcast loop
        a2 = a.data.reshape(-1, a.shape[-1])
        data = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        data = np.matmul(a.data, b.data)
    if _FLOP_COUNTERS:
        flops = 2 * data.size * a.shape[-1]
        for c in _FLOP_COUNTERS:
            c[0] += flops

    def backward(g):
        if b.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                _accumulate(a, (g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                _accumulate(b, a.data.reshape(-1, a.shape[-1]).T @ g2)
        else:
            if a.requires_grad:
                _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
            if b.requires_grad:
                _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(data, (a, b), "matmul", backward)


def add(a, b):
    """Elementwise sum; ``b`` may broadcast (bias-add)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(data, (a, b), "add", backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _make(data, (a, b), "mul", backward)


def scale(a, c):
    """Multiply by a Python scalar constant."""
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), "scale", backward)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, np.transpose(g, inv))

    return _make(np.transpose(a.data, axes), (a,), "transpose", backward)


def reshape(a, shape):
    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), "reshape", backward)


def take_rows(a, m):
    """First ``m`` rows (axis 0) as a view onto ``a``'s storage."""
    if not 1 <= m <= a.shape[0]:
        raise ShapeError(f"row prefix {m} outside [1, {a.shape[0]}]")

    def backward(g):
        full = np.zeros_like(a.data)
        full[:m] = g
        _accumulate(a, full)

    return _make(a.data[:m], (a,), "take_rows", backward)


def getitem(a, key):
    """Basic (slice/int) indexing with gradient scatter-back."""
    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accumulate(a, full)

    return _make(a.data[key], (a,), "getitem", backward)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(data, tuple(tensors), "concat", backward)


def softmax(x, axis=-1, mask=None):
    """Softmax along ``axis``; ``mask`` is an additive constant (e.g. -inf)."""
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), "softmax", backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return _make(data, (x, gain, bias), "layer_norm", backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    data = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du))

    return _make(data, (x,), "gelu", backward)


def cross_entropy(logits, target):
    """Mean negative log-softmax probability of ``target`` over leading axes.

    ``logits`` has shape (K,) with an int target, or (B, K) with B targets.
    """
    target = np.asarray(target)
    k = logits.shape[-1]
    if np.any(target < 0) or np.any(target >= k):
        raise IndexError(f"target {target} outside [0, {k})")
    z = logits.data.reshape(-1, k)
    t = target.reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {z.shape[0]} logit rows")
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    rows = np.arange(len(t))
    loss = float(np.mean(lse[:, 0] - z[rows, t]))

    def backward(g):
        p = np.exp(z - lse)
        p[rows, t] -= 1.0
        _accumulate(logits, (g * p / len(t)).reshape(logits.shape))

    return _make(np.array(loss), (logits,), "cross_entropy", backward)


def embedding(table, ids):
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return _make(table.data[ids], (table,), "embedding", backward)


def sum_all(x):
    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _make(np.array(x.data.sum()), (x,), "sum", backward)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction, in place on ``params``.

    ``state`` is a dict holding ``t`` and per-parameter ``m``/``v`` lists; it is
    created on the first call if empty.  Returns ``state``.
    """
    if not state:
        state.update(t=0, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])
    if len(state["m"]) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            continue
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state shape {m.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    """Adam over a fixed list of leaf tensors."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr,
                  self.betas[0], self.betas[1], self.eps)


def numerical_grad(f, x, eps=1e-5, indices=None):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. array ``x``.

    ``x`` is perturbed in place and restored.  With ``indices`` only those flat
    positions are probed; the rest of the result is NaN.
    """
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape)


def relative_error(a, b, floor=0.0):
    """||a - b|| / max(||a||, ||b||, floor), 0 when both vanish."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
