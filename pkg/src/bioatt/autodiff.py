"""Minimal dense tensor with reverse-mode automatic differentiation.

Supports exactly the operator set the denoising network needs: valid and
same-padded cross-correlation, transposed convolution, elementwise
relu/sigmoid/add/mul (broadcasting over size-1 axes only), channel-wise
mean/max pooling, axis sums, a 1-D softmax and an MSE loss.  Forward data
lives in numpy arrays (float32 by default, float64 for gradient-check
mode); every op validates that its output is finite.
"""

from __future__ import annotations

import ctypes
import itertools
import os
import threading
from typing import Callable, Optional, Sequence

import numpy as np

# Large conv work buffers churn through malloc; keeping them on the heap
# (instead of mmap/munmap per call) avoids re-faulting hundreds of MB every
# training step.  Set BIOATT_NO_MALLOC_TUNING=1 to skip the hint.
if not os.environ.get("BIOATT_NO_MALLOC_TUNING"):
    try:
        _libc = ctypes.CDLL("libc.so.6", use_errno=True)
        _libc.mallopt(-3, 1 << 30)    # M_MMAP_THRESHOLD
        _libc.mallopt(-1, (1 << 31) - 1)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "concat_channels",
    "channel_mean",
    "channel_max",
    "sum_over_axis",
    "softmax_1d",
    "mse_loss",
    "conv2d",
    "conv_transpose2d",
    "backward",
]

# Upper bound on the transient window-matrix size used by the convolution
# kernels, in array elements.  Keeps whole-image forward passes (512x512,
# 96 channels) within a few hundred MB.
_CONV_CHUNK_ELEMS = 24_000_000

_seq_counter = itertools.count()

_tape_state = threading.local()  # per-thread: tapes never cross threads

_scratch_state = threading.local()  # per-thread conv work buffers (grow-only)


def _scratch(key: str, shape: tuple, dtype) -> np.ndarray:
    """Reusable uninitialized buffer; contents are fully overwritten by the
    caller.  Thread-local, so tapes and buffers never cross threads."""
    store = getattr(_scratch_state, "bufs", None)
    if store is None:
        store = _scratch_state.bufs = {}
    n = int(np.prod(shape, dtype=np.int64))
    buf = store.get(key)
    if buf is None or buf.size < n or buf.dtype != np.dtype(dtype):
        store[key] = buf = np.empty(max(n, 1), dtype=dtype)
    return buf[:n].reshape(shape)


class no_grad:
    """Context manager disabling tape recording on the current thread."""

    def __enter__(self):
        self._prev = getattr(_tape_state, "enabled", True)
        _tape_state.enabled = False
        return self

    def __exit__(self, *exc):
        _tape_state.enabled = self._prev
        return False


def _grad_enabled() -> bool:
    return getattr(_tape_state, "enabled", True)


class _Node:
    """Tape record: parents and the function producing their gradients."""

    __slots__ = ("parents", "grad_fn", "seq", "op", "consumed")

    def __init__(self, parents: tuple, grad_fn: Callable, op: str):
        self.parents = parents
        self.grad_fn = grad_fn
        self.seq = next(_seq_counter)
        self.op = op
        self.consumed = False


class Tensor:
    """Dense N-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
    out.grad = None
    out.node = None
    if out.requires_grad:
        out.node = _Node(tuple(parents), grad_fn, op)
    return out


def _check_broadcast(a_shape: tuple, b_shape: tuple, op: str) -> None:
    # Broadcasting may only expand axes of extent 1; ranks must agree.
    if len(a_shape) != len(b_shape):
        raise ValueError(f"{op}: rank mismatch {a_shape} vs {b_shape}")
    for da, db in zip(a_shape, b_shape):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"{op}: incompatible broadcast shapes {a_shape} vs {b_shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# pointwise ops and reductions
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)
        data = a.data + np.asarray(scalar, dtype=a.data.dtype)

        def grad_fn(g):
            return (g,)

        return _result(data, (a,), grad_fn, "add")
    _check_broadcast(a.shape, b.shape, "add")
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), grad_fn, "add")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)
        data = a.data * np.asarray(scalar, dtype=a.data.dtype)

        def grad_fn(g):
            return (g * np.asarray(scalar, dtype=g.dtype),)

        return _result(data, (a,), grad_fn, "mul")
    _check_broadcast(a.shape, b.shape, "mul")
    data = a.data * b.data
    a_data, b_data = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _result(data, (a, b), grad_fn, "mul")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0)
    mask = x.data > 0  # derivative 0 at the kink itself

    def grad_fn(g):
        return (g * mask,)

    return _result(data, (x,), grad_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never overflows.
    v = x.data
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), grad_fn, "sigmoid")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: shapes {a.shape} and {b.shape} differ off the channel axis")
    data = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def grad_fn(g):
        return g[:, :ca], g[:, ca:]

    return _result(data, (a, b), grad_fn, "concat_channels")


def channel_mean(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError("channel_mean expects a [B,C,H,W] tensor")
    c = x.shape[1]
    data = x.data.mean(axis=1, keepdims=True)

    def grad_fn(g):
        return (np.broadcast_to(g / c, x.shape).astype(g.dtype, copy=True),)

    return _result(data, (x,), grad_fn, "channel_mean")


def channel_max(x: Tensor) -> Tensor:
    """Max over the channel axis; ties route the gradient to the first argmax."""
    if x.ndim != 4:
        raise ValueError("channel_max expects a [B,C,H,W] tensor")
    data = x.data.max(axis=1, keepdims=True)
    idx = x.data.argmax(axis=1)[:, None]  # argmax returns the first maximum

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, idx, g, axis=1)
        return (dx,)

    return _result(data, (x,), grad_fn, "channel_max")


def sum_over_axis(x: Tensor, axis=None, keepdims: bool = False, canonical: bool = False) -> Tensor:
    """Sum over one axis (or all, when axis is None).

    With canonical=True the summands along the axis are added in value-sorted
    order with float64 accumulation and a single final rounding, making the
    result independent of their ordering along that axis (used for the organ
    reduction so descriptor permutations are bit-exact) and accurate to half
    an ulp.  The gradient is ones either way.
    """
    if canonical:
        if axis is None:
            raise ValueError("canonical summation requires an explicit axis")
        data = np.sort(x.data, axis=axis).sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    else:
        data = x.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=x.data.dtype)

    def grad_fn(g):
        if axis is None:
            return (np.full(x.shape, g, dtype=x.data.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.data.dtype, copy=True),)

    return _result(data, (x,), grad_fn, "sum_over_axis")


def softmax_1d(x: Tensor) -> Tensor:
    if x.ndim != 1 or x.size == 0:
        raise ValueError("softmax_1d expects a non-empty 1-D tensor")
    shifted = x.data - x.data.max()  # overflow-safe
    e = np.exp(shifted)
    p = e / e.sum()

    def grad_fn(g):
        return (p * (g - float(np.dot(g, p))),)

    return _result(p, (x,), grad_fn, "softmax_1d")


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mse_loss: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    data = np.asarray((diff * diff).mean(), dtype=a.data.dtype)

    def grad_fn(g):
        scale = 2.0 * float(g) / n
        d = (diff * scale).astype(a.data.dtype)
        return d, -d

    return _result(data, (a, b), grad_fn, "mse_loss")


# ---------------------------------------------------------------------------
# convolution kernels
# ---------------------------------------------------------------------------


def _channel_first(key: str, x: np.ndarray) -> np.ndarray:
    xt = _scratch(key, (x.shape[1], x.shape[0], x.shape[2], x.shape[3]), x.dtype)
    np.copyto(xt, x.transpose(1, 0, 2, 3))
    return xt


def _im2col_band(xt: np.ndarray, kh: int, kw: int, r0: int, r1: int, wo: int) -> np.ndarray:
    """Patch matrix [C*kh*kw, B*rows*wo] for output rows [r0, r1).

    xt is the channel-first image [C,B,H,W]; filling via kh*kw contiguous
    slice copies is far faster than gathering a strided window view.
    """
    c, b = xt.shape[0], xt.shape[1]
    rows = r1 - r0
    cols = _scratch("im2col", (c, kh, kw, b, rows, wo), xt.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, u, v] = xt[:, :, r0 + u:r0 + u + rows, v:v + wo]
    return cols.reshape(c * kh * kw, b * rows * wo)


def _corr_valid(x: np.ndarray, w: np.ndarray, per_filter: bool = False) -> np.ndarray:
    """Valid cross-correlation of x[B,C,H,W] with w[F,C,kh,kw] -> [B,F,H',W'].

    With per_filter=True each output channel is contracted by its own GEMV,
    which makes every channel's bits independent of filter ordering (BLAS
    GEMM does not guarantee that under row permutation).  Used by the organ
    attention conv, whose permutation equivariance is contractual.
    """
    b, c, h, width = x.shape
    f, _, kh, kw = w.shape
    ho, wo = h - kh + 1, width - kw + 1
    xt = _channel_first("corr_xt", x)
    w_mat = np.ascontiguousarray(w.reshape(f, c * kh * kw))
    out = _scratch("corr_out", (f, b, ho, wo), x.dtype)
    rows = max(1, _CONV_CHUNK_ELEMS // max(1, b * wo * c * kh * kw))
    for r0 in range(0, ho, rows):
        r1 = min(ho, r0 + rows)
        cols = _im2col_band(xt, kh, kw, r0, r1, wo)
        band = _scratch("corr_band", (f, b * (r1 - r0) * wo), x.dtype)
        if per_filter:
            for fi in range(f):
                np.matmul(w_mat[fi:fi + 1], cols, out=band[fi:fi + 1])
        else:
            np.matmul(w_mat, cols, out=band)
        out[:, :, r0:r1] = band.reshape(f, b, r1 - r0, wo)
    # unconditional copy: the result must never alias the scratch buffer
    # (ascontiguousarray would return a view whenever b == 1)
    return out.transpose(1, 0, 2, 3).copy()


def _corr_weight(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient of _corr_valid w.r.t. its weight: x[B,C,H,W], g[B,F,H',W'] -> [F,C,kh,kw]."""
    b, c, h, width = x.shape
    _, f, ho, wo = g.shape
    kh, kw = h - ho + 1, width - wo + 1
    xt = _channel_first("corr_xt", x)
    gt = _channel_first("cw_gt", g)
    acc = np.zeros((f, c * kh * kw), dtype=x.dtype)
    rows = max(1, _CONV_CHUNK_ELEMS // max(1, b * wo * c * kh * kw))
    for r0 in range(0, ho, rows):
        r1 = min(ho, r0 + rows)
        g_mat = gt[:, :, r0:r1].reshape(f, b * (r1 - r0) * wo)
        acc += g_mat @ _im2col_band(xt, kh, kw, r0, r1, wo).T
    return acc.reshape(f, c, kh, kw)


def _flip_transpose(w: np.ndarray) -> np.ndarray:
    """Swap in/out channels and flip both spatial axes."""
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def _pad_spatial(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: str = "valid",
           per_filter: bool = False) -> Tensor:
    """Cross-correlation of x[B,C,H,W] with weight[F,C,k,k] plus bias[F].

    padding="valid" shrinks the output by k-1; padding="same" (odd k only)
    zero-pads by (k-1)/2 so the output matches the input extent.  See
    _corr_valid for per_filter.
    """
    if stride != 1:
        raise ValueError("conv2d supports stride=1 only")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    f, cw, kh, kw = weight.shape
    if x.shape[1] != cw:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {cw}")
    if bias.shape != (f,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({f},)")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same-padding requires an odd kernel")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        if x.shape[2] < kh or x.shape[3] < kw:
            raise ValueError(f"conv2d: input extent {x.shape[2:]} smaller than kernel ({kh},{kw})")
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding mode {padding!r}")

    xp = _pad_spatial(x.data, ph, pw) if ph or pw else x.data
    out = _corr_valid(xp, weight.data, per_filter=per_filter)
    out += bias.data[None, :, None, None]
    h, width = x.shape[2], x.shape[3]

    def grad_fn(g):
        g = np.ascontiguousarray(g)
        dxp = _corr_valid(_pad_spatial(g, kh - 1, kw - 1), _flip_transpose(weight.data))
        dx = dxp[:, :, ph:ph + h, pw:pw + width] if ph or pw else dxp
        dw = _corr_weight(xp, g)
        db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return _result(out, (x, weight, bias), grad_fn, "conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Adjoint of the valid cross-correlation: x[B,F,H,W], weight[F,C,k,k] -> [B,C,H+k-1,W+k-1]."""
    if stride != 1:
        raise ValueError("conv_transpose2d supports stride=1 only")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv_transpose2d expects 4-D input and weight")
    f, c, kh, kw = weight.shape
    if x.shape[1] != f:
        raise ValueError(f"conv_transpose2d: input has {x.shape[1]} channels, weight expects {f}")
    if bias.shape != (c,):
        raise ValueError(f"conv_transpose2d: bias shape {bias.shape} != ({c},)")

    out = _corr_valid(_pad_spatial(x.data, kh - 1, kw - 1), _flip_transpose(weight.data))
    out += bias.data[None, :, None, None]

    def grad_fn(g):
        g = np.ascontiguousarray(g)
        dx = _corr_valid(g, weight.data)
        dw = _corr_weight(g, x.data)
        db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return _result(out, (x, weight, bias), grad_fn, "conv_transpose2d")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from loss.

    The reverse sweep visits op records in exact reverse execution order.
    Calling backward twice on the same forward graph is an error.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if loss.node is None:
        raise ValueError("loss is not attached to a tape (no tracked op produced it)")
    if loss.node.consumed:
        raise RuntimeError("backward already ran on this graph; re-run the forward pass first")

    # Collect the ancestry of the loss.
    tensors: dict[int, Tensor] = {id(loss): loss}
    stack = [loss]
    ordered = []
    while stack:
        t = stack.pop()
        if t.node is None:
            continue
        ordered.append(t)
        for p in t.node.parents:
            if id(p) not in tensors:
                tensors[id(p)] = p
                stack.append(p)
    ordered.sort(key=lambda t: t.node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for t in ordered:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
        parent_grads = t.node.grad_fn(g)
        t.node.consumed = True
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.data.shape:
                raise AssertionError(f"gradient buffer shape {pg.shape} != tensor shape {p.data.shape}")
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for tid, g in grads.items():
        t = tensors[tid]
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
