"""Define-by-run reverse-mode autodiff on dense float32 numpy arrays.

Every op records its parents and a backward rule on the output tensor; the
graph reachable from a scalar root is the tape for that step. Non-scalar
tensors hold float32. Reductions accumulate in float64, and a reduction that
collapses to a 0-d value keeps float64 so that losses stay precise enough for
finite-difference checks.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

DTYPE = np.float32


class ShapeError(ValueError):
    """Operands have incompatible shapes for an op."""


class ContractError(RuntimeError):
    """An autodiff API was used outside its contract."""


_state = threading.local()


def _dt():
    return getattr(_state, "dtype", DTYPE)


@contextlib.contextmanager
def compute_dtype(dtype):
    """Temporarily compute (and store non-scalar results) in ``dtype``."""
    prev = _dt()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Replay:
    def __init__(self):
        self.values = []
        self.pos = 0
        self.recording = True

    def take(self, value):
        if self.recording:
            self.values.append(np.array(value, copy=True))
            return value
        out = self.values[self.pos]
        self.pos += 1
        return out


@contextlib.contextmanager
def frozen_constants(replay: _Replay):
    """Record (first use) or replay stop-gradient outputs and `nondiff` values.

    Finite differences of a function evaluated under replay treat every
    stop-gradient output as the constant it had at the base point, which is
    exactly the derivative that reverse mode computes.
    """
    prev = getattr(_state, "replay", None)
    _state.replay = replay
    replay.pos = 0
    try:
        yield
    finally:
        _state.replay = prev
        replay.recording = False


def nondiff(value):
    """Mark a value derived from tensor data as a constant (e.g. argmin indices)."""
    replay = getattr(_state, "replay", None)
    return replay.take(value) if replay is not None else value


def _as_array(data):
    arr = np.asarray(data)
    if arr.ndim == 0:
        return arr.astype(np.float64)
    if arr.dtype != _dt():
        arr = arr.astype(_dt())
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        for node, g in _backprop(self, keep=None).items():
            if not node._parents:
                g = g.astype(node.data.dtype, copy=False).reshape(node.shape)
                node.grad = g if node.grad is None else node.grad + g

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _toposort(root):
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(root, keep):
    """Run the backward sweep; return {node: grad} for leaves (keep=None) or `keep`."""
    order = _toposort(root)
    grads = {id(root): np.ones(root.shape, dtype=np.float64 if root.ndim == 0 else _dt())}
    keep_ids = None if keep is None else {id(t) for t in keep}
    result = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if keep_ids is None:
            if not node._parents:
                result[node] = g
        elif id(node) in keep_ids:
            result[node] = g
        if not node._parents:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return result


def grad(root: Tensor, inputs) -> list:
    """Gradients of scalar ``root`` w.r.t. ``inputs`` (any graph nodes), without touching ``.grad``."""
    if root.size != 1:
        raise ContractError(f"grad() needs a scalar root, got shape {root.shape}")
    inputs = list(inputs)
    if not root.requires_grad:
        return [np.zeros_like(t.data) for t in inputs]
    found = _backprop(root, keep=inputs)
    out = []
    for t in inputs:
        g = found.get(t)
        out.append(np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape))
    return out


def _unbroadcast(g, shape):
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _lift(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    return _node(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a) -> Tensor:
    a = _lift(a)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    a = _lift(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _node(out, (a,), lambda g: (g * inside,))


# activations

def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _lift(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(_dt())
    return _node(a.data * scale, (a,), lambda g: (g * scale,))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = expit(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z.astype(np.float64)).sum(axis=axis, keepdims=True))
    out = (z - lse).astype(_dt())

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), backward)


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, weight, bias = _lift(x), _lift(weight), _lift(bias)
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: affine shapes {weight.shape}/{bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mu) * inv).astype(_dt())
    out = xhat * weight.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gxhat = g * weight.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return (gx.astype(_dt()), (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _node(out, (x, weight, bias), backward)


def dropout(a, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    a = _lift(a)
    if not training or p <= 0.0:
        return a
    mask = ((rng.random(a.shape) >= p) / (1.0 - p)).astype(_dt())
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def stop_gradient(a) -> Tensor:
    """Same values, no gradient to the input (the sg[.] operator)."""
    a = _lift(a)
    replay = getattr(_state, "replay", None)
    data = replay.take(a.data) if replay is not None else a.data
    return Tensor(data)


# shape ops

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a, idx) -> Tensor:
    a = _lift(a)

    def backward(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(ga, idx, g)
        return (ga,)

    return _node(a.data[idx], (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tensors, backward)


# reductions

def _expand_reduced(g, shape, axis, keepdims):
    g = np.asarray(g)
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    return _node(out, (a,),
                 lambda g: (_expand_reduced(g, a.shape, axis, keepdims).astype(_dt()),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    count = a.size // max(np.size(out), 1)
    return _node(out, (a,),
                 lambda g: ((_expand_reduced(g, a.shape, axis, keepdims) / count).astype(_dt()),))


# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _node(out, (a, b), backward)


def embedding(weight, indices) -> Tensor:
    """Row lookup ``weight[indices]``; gradients scatter-add back into rows."""
    weight = _lift(weight)
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= weight.shape[0]):
        raise IndexError(f"embedding: index out of range [0, {weight.shape[0]})")

    def backward(g):
        gw = np.zeros(weight.shape, dtype=_dt())
        np.add.at(gw, indices.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _node(weight.data[indices], (weight,), backward)


# convolutions (NCHW, weights OIHW)

def _windows(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv_forward(x, w, stride, pad):
    win = _windows(x, w.shape[2], w.shape[3], stride, pad)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _conv_weight_grad(gy, x, w_shape, stride, pad):
    win = _windows(x, w_shape[2], w_shape[3], stride, pad)
    win = win[:, :, : gy.shape[2], : gy.shape[3]]
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))


def _conv_input_grad(gy, w, x_shape, stride, pad):
    b, c, h, wd = x_shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = gy.shape[2], gy.shape[3]
    cols = np.tensordot(gy, w, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
    buf = np.zeros((b, c, h + 2 * pad, wd + 2 * pad), dtype=_dt())
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return buf[:, :, pad:pad + h, pad:pad + wd]


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if x.shape[2] + 2 * padding < w.shape[2] or x.shape[3] + 2 * padding < w.shape[3]:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {x.shape[2:]}")
    y = _conv_forward(x.data, w.data, stride, padding)
    parents = [x, w]
    if b is not None:
        b = _lift(b)
        y = y + b.data.reshape(1, -1, 1, 1)
        parents.append(b)

    def backward(g):
        gx = _conv_input_grad(g, w.data, x.shape, stride, padding) if x.requires_grad else None
        gw = _conv_weight_grad(g, x.data, w.shape, stride, padding) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(y, parents, backward)


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Adjoint of conv2d; weight layout (C_in, C_out, kh, kw)."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    bsz, _, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (wd - 1) * stride - 2 * padding + kw + output_padding
    y = _conv_input_grad(x.data, w.data, (bsz, w.shape[1], ho, wo), stride, padding)
    parents = [x, w]
    if b is not None:
        b = _lift(b)
        y = y + b.data.reshape(1, -1, 1, 1)
        parents.append(b)

    def backward(g):
        gx = _conv_forward(g, w.data, stride, padding)[:, :, :h, :wd] if x.requires_grad else None
        gw = _conv_weight_grad(x.data, g, w.shape, stride, padding) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(np.ascontiguousarray(y), parents, backward)


# losses

def l1_loss(pred, target) -> Tensor:
    return mean(absolute(sub(pred, target)))


def mse_loss(pred, target) -> Tensor:
    d = sub(pred, target)
    return mean(mul(d, d))


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(``logits``)."""
    logits = _lift(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v).astype(np.float64)
    t = targets.reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"cross_entropy: target outside [0, {v})")
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=1, keepdims=True)
    lse = (zmax + np.log(se))[:, 0]
    n = max(t.size, 1)
    loss = np.mean(lse - z[np.arange(t.size), t])

    def backward(g):
        p = e / se
        p[np.arange(t.size), t] -= 1.0
        return ((g * p / n).astype(_dt()).reshape(logits.shape),)

    return _node(loss, (logits,), backward)
