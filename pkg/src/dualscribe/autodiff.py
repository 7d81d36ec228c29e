"""Dense tensors with a reverse-mode gradient tape.

Everything downstream (layers, losses, models) is built from the primitive
operations in this module.  Design points:

* A ``Tensor`` is a thin wrapper around a numpy array plus an optional
  gradient buffer.  Supported dtypes are float32 (training default) and
  float64 (mandatory for gradient checking).
* Recording is explicit: ops only land on a tape while a ``Tape`` is active
  as a context manager and at least one input requires gradients.  Without
  an active tape the same functions run as plain forward numpy code.
* ``Tape.backward`` walks the recorded ops once, accumulates gradients into
  every requires-grad leaf and marks the tape consumed; a second backward on
  the same tape is a contract error, as is backward on a non-scalar.
* Every op validates shapes up front (raising :class:`ShapeError` that names
  the op and the offending shapes) and checks its output for NaN/Inf
  (raising :class:`NumericError`).  Log-domain code therefore uses the
  finite sentinel :data:`LOG_ZERO` instead of ``-inf``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

# Finite stand-in for log(0).  Large enough that exp underflows to exactly
# 0.0 in both float32 and float64, small enough that sums of a few of them
# stay representable in float32.
LOG_ZERO = -1.0e30

_DTYPES = {
    "f32": np.float32,
    "f64": np.float64,
    np.float32: np.float32,
    np.float64: np.float64,
    np.dtype(np.float32): np.float32,
    np.dtype(np.float64): np.float64,
}


def resolve_dtype(dtype) -> type:
    if dtype not in _DTYPES:
        raise ContractError(f"unsupported dtype {dtype!r}; use 'f32' or 'f64'")
    return _DTYPES[dtype]


class Tensor:
    """A numpy array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=resolve_dtype(dtype))
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # Operator sugar; everything routes through the module-level primitives.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("name", "inputs", "out_id", "backward_fn")

    def __init__(self, name, inputs, out_id, backward_fn):
        self.name = name
        self.inputs = inputs
        self.out_id = out_id
        self.backward_fn = backward_fn


class Tape:
    """Records ops for one forward pass; consumed by a single backward."""

    _stack: list["Tape"] = []

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._stack.pop()

    @staticmethod
    def active() -> "Tape | None":
        return Tape._stack[-1] if Tape._stack else None

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into every requires-grad leaf.

        Returns a map from leaf tensors to their gradient arrays.  Gradients
        add into any existing ``.grad`` buffer, so callers zero grads between
        steps.
        """
        if self._consumed:
            raise ContractError("tape already consumed; one backward per forward")
        if loss.data.shape != ():
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        if id(loss) not in self._produced:
            raise ContractError("loss was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        leaf_grads: dict[Tensor, np.ndarray] = {}
        for node in reversed(self._nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                tid = id(t)
                if tid in self._produced:
                    if tid in grads:
                        grads[tid] = grads[tid] + ig
                    else:
                        grads[tid] = ig
                else:
                    if t in leaf_grads:
                        leaf_grads[t] = leaf_grads[t] + ig
                    else:
                        leaf_grads[t] = ig
        for t, g in leaf_grads.items():
            g = np.asarray(g, dtype=t.dtype)
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad = t.grad + g
        return leaf_grads


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run backward on the innermost active tape."""
    tape = Tape.active()
    if tape is None:
        raise ContractError("backward called with no active tape")
    return tape.backward(loss)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: output contains NaN or Inf")


def _check_same_dtype(name: str, *tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"{name}: mixed dtypes {dt} and {t.dtype}")


def _emit(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward_fn: Callable) -> Tensor:
    _check_finite(name, out_data)
    out = Tensor(out_data)
    tape = Tape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append(_Node(name, tuple(inputs), id(out), backward_fn))
        tape._produced.add(id(out))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and arithmetic primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _emit("mul", (a, b), out, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * x.dtype.type(c)

    def bwd(g):
        return (g * x.dtype.type(c),)

    return _emit("scale", (x,), out, bwd)


def add_const(x: Tensor, c: np.ndarray | float) -> Tensor:
    """Add a non-differentiable constant (mask, bias table, ...)."""
    carr = np.asarray(c, dtype=x.dtype)
    try:
        out = x.data + carr
    except ValueError:
        raise ShapeError(f"add_const: shapes {x.shape} and {carr.shape} do not broadcast")

    def bwd(g):
        return (_unbroadcast(g, x.shape),)

    return _emit("add_const", (x,), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least rank 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _emit("matmul", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# shape plumbing


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    _check_same_dtype("concat", *tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} along axis {axis}"
        )
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(pieces)

    return _emit("concat", tuple(tensors), out, bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    key = [slice(None)] * x.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)
    out = x.data[key]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _emit("slice", (x,), out, bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _emit("transpose", (x,), out, bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")

    def bwd(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), out, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack: empty tensor list")
    _check_same_dtype("stack", *tensors)
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != base:
            raise ShapeError(f"stack: mismatched shapes {base} and {t.shape}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        pieces = np.split(g, len(tensors), axis=axis)
        return tuple(p.reshape(base) for p in pieces)

    return _emit("stack", tuple(tensors), out, bwd)


# ---------------------------------------------------------------------------
# lookups


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Select rows of `table` (gather along axis 0) by an integer id array."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding_lookup: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: id out of range for table with {table.shape[0]} rows"
        )
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (gt,)

    return _emit("embedding_lookup", (table,), out, bwd)


def index_select_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis with per-row indices.

    ``x`` has shape (..., R, K) and ``idx`` shape (R, C) with integer entries
    in [0, K); the output has shape (..., R, C) with
    ``out[..., i, j] = x[..., i, idx[i, j]]``.  Duplicate indices are allowed
    and their gradients accumulate.
    """
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("index_select_last: idx must be integers")
    if x.ndim < 2 or idx.ndim != 2 or idx.shape[0] != x.shape[-2]:
        raise ShapeError(
            f"index_select_last: x shape {x.shape} with idx shape {idx.shape}"
        )
    k = x.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ShapeError(f"index_select_last: index out of range for last axis {k}")
    idx_b = np.broadcast_to(idx, x.shape[:-1] + (idx.shape[1],))
    out = np.take_along_axis(x.data, idx_b, axis=-1)

    r, c = idx.shape
    lead = int(np.prod(x.shape[:-2], dtype=np.int64)) if x.ndim > 2 else 1
    rows = np.repeat(np.arange(lead * r), c)
    cols = np.tile(idx.reshape(-1), lead)

    def bwd(g):
        gx = np.zeros((lead * r, k), dtype=x.dtype)
        np.add.at(gx, (rows, cols), g.reshape(-1))
        return (gx.reshape(x.shape),)

    return _emit("index_select_last", (x,), out, bwd)


# ---------------------------------------------------------------------------
# normalizations and activations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((g - dot) * s,)

    return _emit("softmax", (x,), s, bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (x,), out, bwd)


def logsumexp(x: Tensor, axis, keepdims: bool = False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = np.exp(x.data - m)
    out_k = m + np.log(z.sum(axis=axis, keepdims=True))
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    w = np.exp(x.data - out_k)

    def bwd(g):
        gk = g if keepdims else np.expand_dims(g, axis=axis)
        return (gk * w,)

    return _emit("logsumexp", (x,), out, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} for feature dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = (gg - m1 - xhat * m2) * inv
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gamma, beta), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", (x,), out, bwd)


def swish(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * s

    def bwd(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return _emit("swish", (x,), out, bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return _emit("relu", (x,), out, bwd)


# ---------------------------------------------------------------------------
# convolutions


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-channel 1-D convolution along the time axis with zero same-padding.

    ``x`` is (..., T, C), ``w`` is (k, C) with odd k, optional bias (C,).
    """
    if w.ndim != 2:
        raise ShapeError(f"depthwise_conv1d: weight must be (k, C), got {w.shape}")
    k, c = w.shape
    if k % 2 != 1:
        raise ShapeError(f"depthwise_conv1d: kernel size {k} must be odd")
    if x.ndim < 2 or x.shape[-1] != c:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} vs weight {w.shape}")
    _check_same_dtype("depthwise_conv1d", x, w)
    t = x.shape[-2]
    p = k // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[..., j:j + t, :] * w.data[j]
    inputs = [x, w]
    if b is not None:
        if b.shape != (c,):
            raise ShapeError(f"depthwise_conv1d: bias shape {b.shape} for {c} channels")
        out = out + b.data
        inputs.append(b)

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        lead = tuple(range(g.ndim - 2))
        for j in range(k):
            gxp[..., j:j + t, :] += g * w.data[j]
            gw[j] = (xp[..., j:j + t, :] * g).sum(axis=lead + (-2,))
        gx = gxp[..., p:p + t, :]
        if b is not None:
            gb = g.sum(axis=lead + (-2,))
            return gx, gw, gb
        return gx, gw

    return _emit("depthwise_conv1d", tuple(inputs), out, bwd)


def pointwise_conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Position-wise linear map over the channel axis: (..., T, Cin) -> (..., T, Cout)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"pointwise_conv1d: input {x.shape} vs weight {w.shape}")
    _check_same_dtype("pointwise_conv1d", x, w)
    out = np.matmul(x.data, w.data)
    inputs = [x, w]
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"pointwise_conv1d: bias shape {b.shape} for {w.shape[1]} channels")
        out = out + b.data
        inputs.append(b)

    def bwd(g):
        gx = np.matmul(g, w.data.T)
        gw = np.matmul(
            x.data.reshape(-1, x.shape[-1]).T, g.reshape(-1, g.shape[-1])
        )
        if b is not None:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
            return gx, gw, gb
        return gx, gw

    return _emit("pointwise_conv1d", tuple(inputs), out, bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid 2-D convolution, NCHW layout: (B, Cin, H, W) with (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {w.shape}")
    _check_same_dtype("conv2d", x, w)
    bsz, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    ho = (h - kh) // stride + 1
    wo = (wid - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {w.shape}")
    out = np.zeros((bsz, cout, ho, wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = x.data[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
            out += np.einsum("bcij,oc->boij", patch, w.data[:, :, u, v])
    inputs = [x, w]
    if b is not None:
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} for {cout} channels")
        out = out + b.data[None, :, None, None]
        inputs.append(b)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for u in range(kh):
            for v in range(kw):
                patch = x.data[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
                gw[:, :, u, v] = np.einsum("boij,bcij->oc", g, patch)
                gx[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += np.einsum(
                    "boij,oc->bcij", g, w.data[:, :, u, v]
                )
        if b is not None:
            gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb
        return gx, gw

    return _emit("conv2d", tuple(inputs), out, bwd)


# ---------------------------------------------------------------------------
# masking


def dropout_mask_apply(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a precomputed (already scaled) dropout mask."""
    mask = np.asarray(mask, dtype=x.dtype)
    if mask.shape != x.shape:
        raise ShapeError(f"dropout_mask_apply: mask {mask.shape} vs input {x.shape}")
    out = x.data * mask

    def bwd(g):
        return (g * mask,)

    return _emit("dropout_mask_apply", (x,), out, bwd)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Set positions where `mask` is True to `value`; gradients there are zero."""
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise ShapeError("masked_fill: mask must be boolean")
    try:
        mask_b = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {x.shape}")
    out = np.where(mask_b, x.dtype.type(value), x.data)

    def bwd(g):
        return (np.where(mask_b, x.dtype.type(0), g),)

    return _emit("masked_fill", (x,), out, bwd)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)
        gk = g if keepdims else np.expand_dims(g, axis=axis)
        return (np.broadcast_to(gk, x.shape).astype(x.dtype, copy=False),)

    return _emit("sum", (x,), out, bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else x.data.size // out.size

    def bwd(g):
        if axis is None:
            gk = g
        else:
            gk = g if keepdims else np.expand_dims(g, axis=axis)
        gb = np.broadcast_to(gk, x.shape).astype(x.dtype, copy=False)
        return (gb / x.dtype.type(count),)

    return _emit("mean", (x,), out, bwd)


# ---------------------------------------------------------------------------
# generic dispatcher

_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "slice": slice_axis,
    "transpose": transpose,
    "embedding_lookup": embedding_lookup,
    "log_softmax": log_softmax,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "swish": swish,
    "sigmoid": sigmoid,
    "relu": relu,
    "depthwise_conv1d": depthwise_conv1d,
    "pointwise_conv1d": pointwise_conv1d,
    "dropout_mask_apply": dropout_mask_apply,
    "masked_fill": masked_fill,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "scale": scale,
    "add_const": add_const,
    "reshape": reshape,
    "stack": stack,
    "logsumexp": logsumexp,
    "index_select_last": index_select_last,
    "conv2d": conv2d,
}


def primitive_forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Uniform entry point for the primitive op set, dispatching by name."""
    if op_kind not in _PRIMITIVES:
        raise ContractError(f"unknown op kind {op_kind!r}")
    return _PRIMITIVES[op_kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(f: Callable[[list[Tensor]], Tensor],
                            params: list[Tensor],
                            eps: float = 1e-5) -> float:
    """Compare tape gradients of a scalar function against central differences.

    ``f`` maps the parameter list to a scalar Tensor and must be
    deterministic; all parameters must be float64 with requires_grad set.
    Returns the maximum over all parameter coordinates of

        |analytic - numeric| / max(1e-12, |analytic| + |numeric|)
    """
    for p in params:
        if p.dtype != np.float64:
            raise ContractError("finite_difference_check requires float64 parameters")
        if not p.requires_grad:
            raise ContractError("finite_difference_check: all params must require grad")

    v1 = f(params).item()
    v2 = f(params).item()
    if v1 != v2:
        raise ContractError("finite_difference_check: f is not deterministic")

    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f(params)
        tape.backward(loss)

    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f(params).item()
            flat[i] = orig - eps
            dn = f(params).item()
            flat[i] = orig
            numeric = (up - dn) / (2.0 * eps)
            a = float(aflat[i])
            err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst


def sinusoid_positions(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Classic fixed sin/cos positional table of shape (length, d_model)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table.astype(dtype)
