"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operators the scene-flow network needs are provided. Every op
builds a new :class:`Value` holding a closure that pushes the upstream
gradient into its inputs; :func:`backward` walks the graph in reverse
topological order.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_DTYPE = np.float32


class DimensionError(ValueError):
    pass


def set_default_dtype(dtype) -> None:
    """float64 is the gradient-check mode, float32 the training mode."""
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


def default_dtype():
    return _DTYPE


class Value:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_value(x) -> Value:
    if isinstance(x, Value):
        return x
    arr = np.asarray(x)
    if arr.dtype != _DTYPE:
        arr = arr.astype(_DTYPE)
    return Value(arr)


def _make(data, parents: Sequence[Value], op: str, backward: Callable) -> Value:
    if any(p.requires_grad for p in parents):
        return Value(data, True, op, tuple(parents), backward)
    return Value(data, False, op)


def colsum(a: np.ndarray) -> np.ndarray:
    """Sum over axis 0 of a 2-D array (a BLAS dot is much faster than ``sum(axis=0)``)."""
    return np.ones(a.shape[0], dtype=a.dtype) @ a


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        rest = g.shape[extra:]
        g = colsum(g.reshape(-1, int(np.prod(rest)))).reshape(rest)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = None

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    out = _make(a.data + b.data, (a, b), "add", bw)
    return out


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    q = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * q / b.data, b.shape))

    return _make(q, (a, b), "div", bw)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a single reduction is cheaper than an elementwise isfinite pass
    if not np.isfinite(arr.sum()) and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op}: non-finite input")


def leaky_relu(x, slope: float = 0.1) -> Value:
    x = as_value(x)
    _check_finite(x.data, "leaky_relu")
    d = x.data
    factor = np.where(d > 0, d.dtype.type(1.0), d.dtype.type(slope))
    y = d * factor

    def bw(g):
        x._accum(g * factor)

    return _make(y, (x,), "leaky_relu", bw)


def sigmoid(x) -> Value:
    x = as_value(x)
    _check_finite(x.data, "sigmoid")
    # split by sign to avoid overflow in exp
    z = np.exp(-np.abs(x.data))
    y = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.data.dtype)

    def bw(g):
        x._accum(g * y * (1.0 - y))

    return _make(y, (x,), "sigmoid", bw)


def log_sigmoid(x) -> Value:
    """log(sigmoid(x)) = -softplus(-x), evaluated without overflow."""
    x = as_value(x)
    d = x.data
    y = np.minimum(d, 0.0) - np.log1p(np.exp(-np.abs(d)))
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bw(g):
        x._accum(g * (1.0 - s))

    return _make(y.astype(d.dtype), (x,), "log_sigmoid", bw)


def softmax(x, axis: int = -1) -> Value:
    x = as_value(x)
    _check_finite(x.data, "softmax")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), "softmax", bw)


def activation(x, kind: str, slope: float = 0.1) -> Value:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax_over_neighbors":
        return softmax(x, axis=-1)
    raise ValueError(f"unknown activation {kind!r}")


def sqrt(x, eps: float = 0.0) -> Value:
    x = as_value(x)
    y = np.sqrt(x.data + eps)

    def bw(g):
        x._accum(g * 0.5 / np.maximum(y, 1e-30))

    return _make(y, (x,), "sqrt", bw)


def abs_(x) -> Value:
    x = as_value(x)
    sgn = np.sign(x.data)

    def bw(g):
        x._accum(g * sgn)

    return _make(np.abs(x.data), (x,), "abs", bw)


def stop_gradient(x) -> Value:
    x = as_value(x)
    return Value(x.data, requires_grad=False, op="stop_gradient")


# -- shape / reduction ----------------------------------------------------

def sum_(x, axis=None, keepdims: bool = False) -> Value:
    x = as_value(x)
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _make(y, (x,), "sum", bw)


def mean(x, axis=None) -> Value:
    x = as_value(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def reshape(x, shape) -> Value:
    x = as_value(x)

    def bw(g):
        x._accum(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), "reshape", bw)


def transpose(x) -> Value:
    x = as_value(x)

    def bw(g):
        x._accum(g.T)

    return _make(x.data.T, (x,), "transpose", bw)


def concat(xs: Sequence, axis: int = -1) -> Value:
    xs = [as_value(x) for x in xs]
    ax = axis % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                x._accum(g[tuple(sl)])

    return _make(np.concatenate([x.data for x in xs], axis=ax), xs, "concat", bw)


def max_(x, axis: int) -> Value:
    """Max over one axis; the gradient goes to the first argmax."""
    x = as_value(x)
    am = np.argmax(x.data, axis=axis)
    y = np.take_along_axis(x.data, np.expand_dims(am, axis), axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(am, axis), np.expand_dims(g, axis), axis)
        x._accum(gx)

    return _make(y, (x,), "max", bw)


def take_rows(x, idx) -> Value:
    """out[...] = x[idx[...]] along axis 0; backward scatter-adds."""
    x = as_value(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = np.argwhere((idx < 0) | (idx >= n))[0]
        raise IndexError(f"index {int(idx[tuple(bad)])} at {tuple(int(b) for b in bad)} "
                         f"out of range for {n} rows")

    def bw(g):
        x._accum(scatter_rows(g.reshape((-1,) + x.shape[1:]), idx.reshape(-1), n))

    return _make(x.data[idx], (x,), "take_rows", bw)


def scatter_rows(g: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """out[i] = sum of g[j] over all j with idx[j] == i."""
    if g.ndim == 2 and len(idx) > 256:
        m = sp.csr_matrix((np.ones(len(idx), dtype=g.dtype), (idx, np.arange(len(idx)))),
                          shape=(n, len(idx)))
        return np.asarray(m @ g)
    out = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
    np.add.at(out, idx, g)
    return out


def gather_neighbors(x, idx) -> Value:
    """[N, C] features and an [M, K] index table -> [M, K, C]."""
    x = as_value(x)
    idx = np.asarray(idx)
    if x.ndim != 2 or idx.ndim != 2:
        raise DimensionError(f"gather_neighbors expects [N,C] and [M,K], got {x.shape} and {idx.shape}")
    return take_rows(x, idx)


def weighted_sum(x, w) -> Value:
    """sum_k w[m,k] * x[m,k,:] -> [M, C]."""
    x, w = as_value(x), as_value(w)
    if x.ndim != 3 or w.shape != x.shape[:2]:
        raise DimensionError(f"weighted_sum: x {x.shape} incompatible with w {w.shape}")
    y = np.einsum("mk,mkc->mc", w.data, x.data)

    def bw(g):
        if x.requires_grad:
            x._accum(w.data[:, :, None] * g[:, None, :])
        if w.requires_grad:
            w._accum(np.einsum("mc,mkc->mk", g, x.data))

    return _make(y, (x, w), "weighted_sum", bw)


def reduce_neighbors(x, kind: str, w=None) -> Value:
    if kind == "max":
        return max_(x, axis=1)
    if kind == "weighted_sum":
        if w is None:
            raise ValueError("weighted_sum requires neighbor weights")
        return weighted_sum(x, w)
    raise ValueError(f"unknown reduction {kind!r}")


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            b._accum(a2.T @ g.reshape(-1, g.shape[-1]))

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def linear(x, w, b=None) -> Value:
    """x [..., Cin] @ w [Cin, Cout] + b [Cout]."""
    x, w = as_value(x), as_value(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None:
        b = as_value(b)
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xs = x.data.reshape(-1, w.shape[0])
    y = xs @ w.data
    if b is not None:
        y = y + b.data
    y = y.reshape(x.shape[:-1] + (w.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            x._accum((g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w._accum(xs.T @ g2)
        if b is not None and b.requires_grad:
            b._accum(colsum(g2))

    return _make(y, parents, "linear", bw)


def batch_norm(x, scale, shift, state: dict | None = None, training: bool = True,
               eps: float = 1e-5, momentum: float = 0.9) -> Value:
    """Per-channel standardization over every axis but the last.

    ``state`` carries running ``mean``/``var``; in training they are
    updated as ``momentum * old + (1 - momentum) * batch``.
    """
    x, scale, shift = as_value(x), as_value(scale), as_value(shift)
    c = x.shape[-1]
    xs = x.data.reshape(-1, c)
    n = xs.shape[0]
    if n == 0:
        raise DimensionError("batch_norm on an empty batch")
    if training:
        mu = colsum(xs) / n
        xc = xs - mu
        var = colsum(xc * xc) / n
        if state is not None:
            state["mean"] = momentum * state["mean"] + (1 - momentum) * mu
            state["var"] = momentum * state["var"] + (1 - momentum) * var
    else:
        mu, var = state["mean"], state["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xs - mu) * inv
    y = (xhat * scale.data + shift.data).reshape(x.shape).astype(x.data.dtype)

    def bw(g):
        g2 = g.reshape(-1, c)
        if scale.requires_grad:
            scale._accum(colsum(g2 * xhat))
        if shift.requires_grad:
            shift._accum(colsum(g2))
        if x.requires_grad:
            gh = g2 * scale.data
            if training:
                gx = inv / n * (n * gh - colsum(gh) - xhat * colsum(gh * xhat))
            else:
                gx = gh * inv
            x._accum(gx.reshape(x.shape))

    return _make(y, (x, scale, shift), "batch_norm", bw)


def polar_rotation(m) -> Value:
    """Closest proper rotation to a 3x3 matrix (special orthogonal polar factor).

    For ``m = U S V^T`` this returns ``U diag(1, 1, d) V^T`` with ``d`` fixing
    the determinant to +1; it maximizes ``trace(R^T m)``.
    """
    m = as_value(m)
    if m.shape != (3, 3):
        raise DimensionError(f"polar_rotation expects 3x3, got {m.shape}")
    u, s, vt = np.linalg.svd(m.data.astype(np.float64))
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    D = np.array([1.0, 1.0, d])
    r = (u * D) @ vt
    sig = D * s
    v = vt.T

    def bw(g):
        # dR = R Omega with Omega skew; in the V basis
        # Omega~_ij (sig_i + sig_j) = (V^T (R^T dM - dM^T R) V)_ij
        b = v.T @ r.T @ g.astype(np.float64) @ v
        den = sig[:, None] + sig[None, :]
        den = np.where(np.abs(den) < 1e-12, 1e-12, den)
        c = v @ (b / den) @ v.T
        m._accum((r @ (c - c.T)).astype(m.data.dtype))

    return _make(r.astype(m.data.dtype), (m,), "polar_rotation", bw)


# -- graph traversal ------------------------------------------------------

def _topo(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(root: Value) -> None:
    if root.data.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo(root)
    root._accum(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if node._parents:
                # interior grads are not needed once propagated
                node.grad = None


# -- parameters, optimizer, checkpoints ------------------------------------

class Parameter:
    __slots__ = ("name", "value", "m", "v", "step")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.value = Value(np.asarray(data, dtype=_DTYPE), requires_grad=True, op="param")
        self.m = np.zeros_like(self.value.data)
        self.v = np.zeros_like(self.value.data)
        self.step = 0

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> np.ndarray:
        g = self.value.grad
        return np.zeros_like(self.value.data) if g is None else g

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.value.zero_grad()


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    for p in params:
        g = p.grad
        p.step += 1
        p.m = beta1 * p.m + (1 - beta1) * g
        p.v = beta2 * p.v + (1 - beta2) * g * g
        mhat = p.m / (1 - beta1 ** p.step)
        vhat = p.v / (1 - beta2 ** p.step)
        upd = lr * mhat / (np.sqrt(vhat) + eps)
        p.value.data = (p.value.data - upd).astype(p.value.data.dtype)


CHECKPOINT_MAGIC = b"EGFK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write name -> array pairs in the EGFK layout (float32 little-endian)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an EGFK checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        out[name] = arr.astype(np.float32)
    return out
