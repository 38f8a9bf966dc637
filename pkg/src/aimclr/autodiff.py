"""Minimal reverse-mode autodiff over numpy arrays.

Each op returns a new :class:`Tensor` that remembers its inputs and a
closure mapping the output gradient to input gradients. ``backward`` builds
the tape (a topological ordering of the recorded ops) and walks it once in
reverse.
"""

from dataclasses import dataclass

import numpy as np

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def back(g):
        gb = -g * out / b.data
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), back, "div")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def masked_mul(a, mask):
    """Multiply by a constant mask; no gradient flows into the mask."""
    mask = np.asarray(mask, dtype=a.data.dtype)
    try:
        np.broadcast_shapes(a.shape, mask.shape)
    except ValueError:
        raise ShapeError(f"masked_mul: incompatible shapes {a.shape} and {mask.shape}") from None

    def back(g):
        return (_unbroadcast(g * mask, a.shape),)

    return _result(a.data * mask, (a,), back, "masked_mul")


def relu(a):
    out = np.maximum(a.data, 0)

    def back(g):
        return (g * (a.data > 0),)

    return _result(out, (a,), back, "relu")


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        return (g * out * (1 - out),)

    return _result(out, (a,), back, "sigmoid")


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a):
    return _result(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _result(out, (a,), back, "mean")


def logsumexp(a, axis=-1, keepdims=False):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out_k = np.log(s) + m
    w = e / s

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    return _result(out, (a,), back, "logsumexp")


def softmax(a, axis=-1):
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), back, "softmax")


def log_softmax(a, axis=-1):
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def l2_normalize(a, axis=-1, eps=1e-12):
    x = a.data
    raw = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    norm = np.maximum(raw, eps)
    out = x / norm

    def back(g):
        # below eps the op is the linear map x / eps
        proj = (g - out * (g * out).sum(axis=axis, keepdims=True)) / norm
        return (np.where(raw < eps, g / eps, proj),)

    return _result(out, (a,), back, "l2_normalize")


# ---------------------------------------------------------------- structure


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), back, "matmul")


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes):
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), back, "concat")


def take(a, index):
    """Basic/advanced indexing; gradient scatters back with accumulation."""
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), back, "take")


def temporal_conv(x, weight, stride=1):
    """Zero-padded convolution along the time axis, channels last.

    x: [N, T, V, Cin], weight: [K, Cin, Cout] with odd K -> [N, T', V, Cout]
    where T' = ceil(T / stride).
    """
    if x.ndim != 4 or weight.ndim != 3 or x.shape[3] != weight.shape[1]:
        raise ShapeError(f"temporal_conv: incompatible shapes {x.shape} and {weight.shape}")
    k, cin, cout = weight.shape
    if k % 2 != 1:
        raise ShapeError(f"temporal_conv: kernel size must be odd, got shape {weight.shape}")
    n, t, v, _ = x.shape
    pad = k // 2
    t_out = -(-t // stride)
    span = stride * (t_out - 1) + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0), (0, 0)))
    cols = np.stack([xp[:, j:j + span:stride] for j in range(k)], axis=3)
    cols2 = cols.reshape(n * t_out * v, k * cin)
    w2 = weight.data.reshape(k * cin, cout)
    out = (cols2 @ w2).reshape(n, t_out, v, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(weight.shape)
        gcols = (g2 @ w2.T).reshape(n, t_out, v, k, cin)
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, j:j + span:stride] += gcols[:, :, :, j]
        return gxp[:, pad:pad + t], gw

    return _result(out, (x, weight), back, "temporal_conv")


# ---------------------------------------------------------------- backward


def build_tape(loss):
    """Topologically ordered list of recorded tensors reachable from ``loss``."""
    tape, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return tape


def backward(loss):
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    tape = build_tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray
    tol: float

    @property
    def passed(self):
        return bool(self.max_rel_error <= self.tol)


class NonFiniteError(FloatingPointError):
    pass


def grad_check(f, x, eps=1e-5, tol=1e-4, floor=1e-6):
    """Compare the tape gradient of scalar ``f(x)`` against central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps coordinates whose true gradient is zero from dividing by zero.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    base = np.array(x.data, dtype=np.float64, copy=True)

    probe = Tensor(base, requires_grad=True)
    out = f(probe)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("grad_check: non-finite value at the unperturbed point")
    if out.requires_grad:
        backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        idx = np.unravel_index(i, base.shape)
        vals = []
        for sign in (1.0, -1.0):
            pert = base.copy()
            pert[idx] += sign * eps
            v = f(Tensor(pert)).data
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"grad_check: non-finite value at coordinate {tuple(int(i) for i in idx)}")
            vals.append(float(np.sum(v)))
        flat[i] = (vals[0] - vals[1]) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    return GradCheckReport(float(rel.max()) if rel.size else 0.0, worst, analytic, numeric, tol)
