"""Dense float64 tensors with reverse-mode automatic differentiation.

Only what the adaptor network and its objective need: 2-D matrices, row
vectors, scalars, plus a fused grouped attention primitive.  Every operation
records a closure that maps the output gradient to input gradients; calling
``backward`` on a scalar walks the recorded graph in reverse topological
order and accumulates into ``.grad``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, GraphStateError, NumericError

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        # results of recorded ops are fresh arrays; only user input is copied
        self.data = np.asarray(data, dtype=np.float64) if _op else np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators --------------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    # -- reverse pass -----------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1 or self.data.ndim > 2:
            raise GraphStateError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphStateError("backward already ran on this graph; run a new forward pass")
        if not self.requires_grad:
            raise GraphStateError("loss does not depend on any tensor that requires grad")
        order = _topological_order(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        self._consumed = True

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.asarray(g, dtype=np.float64).reshape(self.data.shape)
        else:
            self.grad = self.grad + g


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    tracked = tuple(p for p in parents if p.requires_grad)
    out = Tensor(data, requires_grad=bool(tracked), _parents=tracked, _op=op)
    if tracked:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0.0):
        raise NumericError("division by zero")
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), "div", backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def backward(g):
        x._accumulate(g * c)

    return _result(x.data * c, (x,), "scale", backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        x._accumulate(g * out)

    return _result(out, (x,), "exp", backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(~(x.data > 0.0)):
        raise NumericError("log of a non-positive value")

    def backward(g):
        x._accumulate(g / x.data)

    return _result(np.log(x.data), (x,), "log", backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0

    def backward(g):
        x._accumulate(g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), "relu", backward)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    inner = _GELU_C * v * (1.0 + 0.044715 * v2)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner))

    return _result(out, (x,), "gelu", backward)


# -- reductions and reshaping -----------------------------------------------
def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _result(out, (x,), "sum", backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def transpose(x) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g.T)

    return _result(np.ascontiguousarray(x.data.T), (x,), "transpose", backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), "reshape", backward)


def cols(x, start: int, stop: int) -> Tensor:
    """Column slice ``x[:, start:stop]``."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x._accumulate(full)

    return _result(x.data[:, start:stop], (x,), "cols", backward)


def hstack(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _result(np.hstack([p.data for p in parts]), parts, "hstack", backward)


def diag(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"diag needs a square matrix, got {x.shape}")

    def backward(g):
        x._accumulate(np.diag(g))

    return _result(np.diag(x.data).copy(), (x,), "diag", backward)


def group_mean(x, n_groups: int) -> Tensor:
    """Average consecutive row blocks: (n_groups*k) x d -> n_groups x d."""
    x = as_tensor(x)
    rows, d = x.shape
    if n_groups < 1 or rows % n_groups:
        raise DimensionError(f"cannot split {rows} rows into {n_groups} equal groups")
    k = rows // n_groups

    def backward(g):
        x._accumulate(np.repeat(g / k, k, axis=0))

    return _result(x.data.reshape(n_groups, k, d).mean(axis=1), (x,), "group_mean", backward)


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), "matmul", backward)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisation ----------------------------------------------------------
def _check_finite(v: np.ndarray, op: str) -> None:
    if np.isnan(v).any():
        raise NumericError(f"{op}: NaN in input")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), "softmax", backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        x._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _result(out, (x,), "log_softmax", backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 2 or x.shape[1] == 0:
        raise DimensionError(f"layer_norm needs a tokens x d matrix with d >= 1, got {x.shape}")
    if eps <= 0:
        raise DimensionError("layer_norm eps must be positive")
    d = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(
                inv * (gx - gx.mean(axis=1, keepdims=True)
                       - xhat * (gx * xhat).sum(axis=1, keepdims=True) / d)
            )

    return _result(out, (x, gain, bias), "layer_norm", backward)


def l2_normalize_rows(x, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def backward(g):
        x._accumulate((g - out * (g * out).sum(axis=1, keepdims=True)) / norm)

    return _result(out, (x,), "l2_normalize_rows", backward)


# -- attention --------------------------------------------------------------
def grouped_attention(q, k, v, n_groups: int, scale_factor: float, weights_out: list | None = None) -> Tensor:
    """Scaled dot-product attention restricted to row blocks.

    ``q`` holds ``n_groups`` consecutive blocks of query rows, ``k``/``v`` the
    same number of key/value blocks; block ``i`` of the queries only attends to
    block ``i`` of the keys.  If ``weights_out`` is a list the (n_groups, Tq, Tk)
    attention weights are appended to it.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[1] != k.shape[1] or k.shape != v.shape:
        raise DimensionError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    if q.shape[0] % n_groups or k.shape[0] % n_groups:
        raise DimensionError(f"attention: rows not divisible into {n_groups} groups")
    dh = q.shape[1]
    tq, tk = q.shape[0] // n_groups, k.shape[0] // n_groups
    if tk == 1:
        return _single_key_attention(q, k, v, n_groups, tq, weights_out)
    q3 = q.data.reshape(n_groups, tq, dh)
    k3 = k.data.reshape(n_groups, tk, dh)
    v3 = v.data.reshape(n_groups, tk, dh)
    scores = (q3 @ k3.transpose(0, 2, 1)) * scale_factor
    _check_finite(scores, "attention")
    z = np.exp(scores - scores.max(axis=-1, keepdims=True))
    w = z / z.sum(axis=-1, keepdims=True)
    out = w @ v3
    if weights_out is not None:
        weights_out.append(w)

    def backward(g):
        g3 = g.reshape(n_groups, tq, dh)
        if v.requires_grad:
            v._accumulate((w.transpose(0, 2, 1) @ g3).reshape(v.shape))
        dw = g3 @ v3.transpose(0, 2, 1)
        ds = w * (dw - (dw * w).sum(axis=-1, keepdims=True)) * scale_factor
        if q.requires_grad:
            q._accumulate((ds @ k3).reshape(q.shape))
        if k.requires_grad:
            k._accumulate((ds.transpose(0, 2, 1) @ q3).reshape(k.shape))

    return _result(out.reshape(n_groups * tq, dh), (q, k, v), "attention", backward)


def _single_key_attention(q, k, v, n_groups, tq, weights_out):
    # softmax over one logit is exactly 1: output copies v, no gradient reaches q or k
    _check_finite(q.data, "attention")
    _check_finite(k.data, "attention")
    if weights_out is not None:
        weights_out.append(np.ones((n_groups, tq, 1)))
    out = np.repeat(v.data, tq, axis=0) if tq > 1 else v.data.copy()

    def backward(g):
        if v.requires_grad:
            v._accumulate(g.reshape(n_groups, tq, -1).sum(axis=1))

    return _result(out, (v,) if v.requires_grad else (), "attention", backward)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
