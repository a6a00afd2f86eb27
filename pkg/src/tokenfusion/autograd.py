"""Minimal dense-tensor arithmetic with reverse-mode differentiation.

Tensors wrap numpy arrays (float64 by default, float32 selectable) and
record, for every operation, the input tensors together with a
vector-Jacobian callback.  ``backward`` replays this tape in reverse
creation order.  Because the replay order and the accumulation order are
fixed by creation ids, repeated backward passes over the same graph are
bitwise identical, single-threaded.

Operands that are plain floats or numpy arrays stay raw (they never need
gradients); only Tensor inputs join the graph.  Every operation validates
that its output is finite: NaN/Inf raises ``NumericError`` instead of
propagating silently.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import NumericError, OracleError, ShapeError

DEFAULT_DTYPE = np.float64

_ids = itertools.count()

_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-operation NaN/Inf validation; returns the previous setting.

    The training loop turns this off for throughput and validates the loss
    each step instead; leaf tensors are always validated on construction.
    """
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


def _require_finite(arr, op: str) -> None:
    # cheap probe first: the sum of a finite array is finite unless it
    # overflows, so only the (rare) failure path pays for the full scan
    if not math.isfinite(np.add.reduce(arr, axis=None)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values produced by '{op}'")


class Tensor:
    """Dense n-dimensional value participating in a differentiable graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        _require_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._id = next(_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        reduced = self.data.size if axis is None else _axis_size(self.data.shape, axis)
        return tensor_sum(self, axis=axis, keepdims=keepdims) * (1.0 / reduced)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def unsqueeze(self, axis: int):
        return reshape(self, self.data.shape[:axis] + (1,) + self.data.shape[axis:])


def _axis_size(shape, axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    """Wrap a value as a graph constant (no gradient, no parents)."""
    return Tensor(value)


def _split(value):
    """Raw data plus the Tensor handle when the operand is in the graph."""
    if isinstance(value, Tensor):
        return value.data, (value if value.requires_grad else None)
    if isinstance(value, (float, int, np.ndarray)):
        return value, None
    return np.asarray(value, dtype=DEFAULT_DTYPE), None


def _from_op(data: np.ndarray, parents, op: str) -> Tensor:
    if _finite_checks:
        _require_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = bool(parents)
    out.grad = None
    out._parents = parents
    out._id = next(_ids)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


# -- primitive operations ----------------------------------------------------


def add(a, b) -> Tensor:
    ad, at = _split(a)
    bd, bt = _split(b)
    parents = []
    if at is not None:
        parents.append((at, lambda g: _unbroadcast(g, at.data.shape)))
    if bt is not None:
        parents.append((bt, lambda g: _unbroadcast(g, bt.data.shape)))
    return _from_op(ad + bd, parents, "add")


def sub(a, b) -> Tensor:
    ad, at = _split(a)
    bd, bt = _split(b)
    parents = []
    if at is not None:
        parents.append((at, lambda g: _unbroadcast(g, at.data.shape)))
    if bt is not None:
        parents.append((bt, lambda g: _unbroadcast(-g, bt.data.shape)))
    return _from_op(ad - bd, parents, "sub")


def mul(a, b) -> Tensor:
    ad, at = _split(a)
    bd, bt = _split(b)
    parents = []
    if at is not None:
        parents.append((at, lambda g: _unbroadcast(g * bd, at.data.shape)))
    if bt is not None:
        parents.append((bt, lambda g: _unbroadcast(g * ad, bt.data.shape)))
    return _from_op(ad * bd, parents, "mul")


def div(a, b) -> Tensor:
    ad, at = _split(a)
    bd, bt = _split(b)
    parents = []
    if at is not None:
        parents.append((at, lambda g: _unbroadcast(g / bd, at.data.shape)))
    if bt is not None:
        parents.append((bt, lambda g: _unbroadcast(-g * ad / (bd * bd), bt.data.shape)))
    return _from_op(ad / bd, parents, "div")


def neg(a) -> Tensor:
    ad, at = _split(a)
    parents = [(at, lambda g: -g)] if at is not None else []
    return _from_op(-ad, parents, "neg")


def pow_const(a, exponent: float) -> Tensor:
    ad, at = _split(a)
    c = float(exponent)
    parents = []
    if at is not None:
        parents.append((at, lambda g: g * c * ad ** (c - 1.0)))
    return _from_op(ad ** c, parents, "pow")


def matmul(a, b) -> Tensor:
    ad, at = _split(a)
    bd, bt = _split(b)
    if getattr(ad, "ndim", 0) < 2 or getattr(bd, "ndim", 0) < 2:
        raise ShapeError(f"matmul needs matrices, got shapes "
                         f"{getattr(ad, 'shape', ())} and {getattr(bd, 'shape', ())}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    parents = []
    if at is not None:
        parents.append((at, lambda g: _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)))
    if bt is not None:
        parents.append((bt, lambda g: _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)))
    return _from_op(ad @ bd, parents, "matmul")


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    ad, at = _split(a)
    parents = []
    if at is not None:
        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, ad.shape)
        parents.append((at, vjp))
    return _from_op(ad.sum(axis=axis, keepdims=keepdims), parents, "sum")


def reshape(a, shape: tuple) -> Tensor:
    ad, at = _split(a)
    parents = [(at, lambda g: g.reshape(ad.shape))] if at is not None else []
    return _from_op(ad.reshape(shape), parents, "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    ad, at = _split(a)
    parents = [(at, lambda g: g.swapaxes(ax1, ax2))] if at is not None else []
    return _from_op(ad.swapaxes(ax1, ax2), parents, "swapaxes")


def exp(a) -> Tensor:
    ad, at = _split(a)
    out_data = np.exp(ad)
    parents = [(at, lambda g: g * out_data)] if at is not None else []
    return _from_op(out_data, parents, "exp")


def log(a) -> Tensor:
    ad, at = _split(a)
    parents = [(at, lambda g: g / ad)] if at is not None else []
    return _from_op(np.log(ad), parents, "log")


def tanh(a) -> Tensor:
    ad, at = _split(a)
    out_data = np.tanh(ad)
    parents = [(at, lambda g: g * (1.0 - out_data * out_data))] if at is not None else []
    return _from_op(out_data, parents, "tanh")


def sigmoid(a) -> Tensor:
    ad, at = _split(a)
    out_data = np.empty_like(ad)
    pos = ad >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    out_data[~pos] = ez / (1.0 + ez)
    parents = [(at, lambda g: g * out_data * (1.0 - out_data))] if at is not None else []
    return _from_op(out_data, parents, "sigmoid")


def absolute(a) -> Tensor:
    # subgradient at 0 is 0 (np.sign convention)
    ad, at = _split(a)
    parents = [(at, lambda g: g * np.sign(ad))] if at is not None else []
    return _from_op(np.abs(ad), parents, "abs")


def take_tokens(a, idx: np.ndarray) -> Tensor:
    """Gather rows along the token axis (second to last).

    ``idx`` may be 1-d (same rows for every batch element) or 2-d
    ``[batch, rows]`` for per-sample gathers.  The gradient scatter-adds,
    so duplicate indices accumulate.
    """
    ad, at = _split(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim == 1:
        out_data = ad[..., idx, :]

        def vjp(g):
            gz = np.zeros_like(ad)
            if gz.ndim == 2:
                np.add.at(gz, idx, g)
            else:
                flat_g = g.reshape(-1, g.shape[-2], g.shape[-1])
                flat_z = gz.reshape(-1, gz.shape[-2], gz.shape[-1])
                for i in range(flat_z.shape[0]):
                    np.add.at(flat_z[i], idx, flat_g[i])
            return gz

    elif idx.ndim == 2:
        if ad.ndim != 3:
            raise ShapeError(f"batched gather expects [B,N,C] input, got {ad.shape}")
        if idx.shape[0] != ad.shape[0]:
            raise ShapeError(f"batch sizes disagree: {idx.shape} vs {ad.shape}")
        batch = np.arange(ad.shape[0], dtype=np.intp)[:, None]
        out_data = ad[batch, idx]

        def vjp(g):
            gz = np.zeros_like(ad)
            np.add.at(gz, (batch, idx), g)
            return gz

    else:
        raise ShapeError(f"gather index must be 1-d or 2-d, got shape {idx.shape}")
    parents = [(at, vjp)] if at is not None else []
    return _from_op(out_data, parents, "take_tokens")


def concat(tensors, axis: int = 0) -> Tensor:
    pairs = [_split(t) for t in tensors]
    sizes = [p[0].shape[axis] for p in pairs]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, (_, t) in enumerate(pairs):
        if t is None:
            continue
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        parents.append((t, vjp))
    return _from_op(np.concatenate([p[0] for p in pairs], axis=axis), parents, "concat")


def stop_gradient(a) -> Tensor:
    """Graph constant carrying the current value of ``a``."""
    ad, _ = _split(a)
    return _from_op(np.asarray(ad), [], "stop_gradient")


# -- fused neural primitives ---------------------------------------------------

GELU_SCALE = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_COEFF = 0.044715


def gelu(x) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(s (x + c x^3)))."""
    xd, xt = _split(x)
    sq = xd * xd
    arg = sq * xd
    arg *= GELU_COEFF
    arg += xd
    arg *= GELU_SCALE
    inner = np.tanh(arg)
    half = 0.5 * xd
    out_data = half * inner
    out_data += half
    parents = []
    if xt is not None:
        def vjp(g):
            sech2 = 1.0 - inner * inner
            du = (3.0 * GELU_COEFF) * sq
            du += 1.0
            du *= GELU_SCALE
            term = half * sech2
            term *= du
            term += 0.5 * (1.0 + inner)
            term *= g
            return term
        parents.append((xt, vjp))
    return _from_op(out_data, parents, "gelu")


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction)."""
    xd, xt = _split(x)
    _check_axis(xd, axis)
    z = xd - np.max(xd, axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    out_data = z
    parents = []
    if xt is not None:
        def vjp(g):
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            return out_data * (g - inner)
        parents.append((xt, vjp))
    return _from_op(out_data, parents, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    xd, xt = _split(x)
    _check_axis(xd, axis)
    shifted = xd - np.max(xd, axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    parents = []
    if xt is not None:
        def vjp(g):
            return g - np.exp(out_data) * g.sum(axis=axis, keepdims=True)
        parents.append((xt, vjp))
    return _from_op(out_data, parents, "log_softmax")


def _check_axis(arr, axis: int) -> None:
    if not -arr.ndim <= axis < arr.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {arr.shape}")


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel (last) axis with population variance."""
    if eps <= 0:
        raise ShapeError("layer_norm eps must be positive")
    xd, xt = _split(x)
    gd, gt = _split(gamma)
    bd, bt = _split(beta)
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gd + bd
    parents = []
    if xt is not None:
        def vjp_x(g):
            gx = g * gd
            term = gx - gx.mean(axis=-1, keepdims=True) \
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            return term * inv
        parents.append((xt, vjp_x))
    if gt is not None:
        parents.append((gt, lambda g: _unbroadcast(g * xhat, gd.shape)))
    if bt is not None:
        parents.append((bt, lambda g: _unbroadcast(g, bd.shape)))
    return _from_op(out_data, parents, "layer_norm")


# -- backward pass -------------------------------------------------------------


def backward(loss: Tensor, params=None):
    """Reverse-mode differentiation from a scalar loss.

    Returns a dict mapping each tensor in ``params`` (or every
    ``requires_grad`` tensor reached, if ``params`` is None) to its
    gradient array.  Tensors not reached by the backward sweep get zero
    gradients.  Also stores gradients on ``.grad``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        for parent, _ in node._parents:
            if parent._id not in nodes:
                stack.append(parent)

    grads = {loss._id: np.ones_like(loss.data)}
    reached = {}
    for node in sorted(nodes.values(), key=lambda t: t._id, reverse=True):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g
            reached[node._id] = (node, g)
        for parent, vjp in node._parents:
            contribution = vjp(g)
            pid = parent._id
            if pid in grads:
                grads[pid] = grads[pid] + contribution
            else:
                grads[pid] = contribution

    if params is None:
        return {node: g for node, g in reached.values()}
    out = {}
    for p in params:
        hit = reached.get(p._id)
        out[p] = hit[1] if hit is not None else np.zeros_like(p.data)
    return out


def finite_diff_grad(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h.

    ``f`` is called with ``x`` after perturbing ``x``'s storage in place;
    it must be deterministic.  Independent of the analytic backward path.
    """
    if not 1e-7 <= h <= 1e-3:
        raise OracleError(f"step h={h} outside [1e-7, 1e-3]")
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    grad = np.zeros_like(data, dtype=np.float64)
    flat = data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        v = flat[i]
        flat[i] = v + h
        fp = float(f(x))
        flat[i] = v - h
        fm = float(f(x))
        flat[i] = v
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError("objective returned a non-finite value during differencing")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
