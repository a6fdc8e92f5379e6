"""Dense-tensor numeric core with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float32 for training, float64 for
verification). Differentiable operations record themselves on the active
:class:`Tape`; :func:`backward` replays the tape in exact reverse execution
order and accumulates gradients into every ``requires_grad`` tensor that
contributed to the loss.

Conventions fixed here once and relied on everywhere else:

* 4-D activations are laid out ``(batch, channel, height, width)``.
* ``relu`` has subgradient 0 at 0; ``sigmoid`` uses the numerically stable
  split form.
* ``bilinear_resize`` defaults to ``align_corners=False`` (half-pixel-center
  sampling); the same convention is used by RoI sampling downstream.
* Convolution is cross-correlation, computed directly (blocked over kernel
  offsets), no FFT or im2col.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor", "Tape", "DimensionError", "ContractError", "no_grad",
    "tensor", "constant", "backward", "zero_grads", "set_nan_guard",
    "add", "sub", "mul", "div", "neg", "scale",
    "relu", "sigmoid", "tanh", "absolute", "sqrt", "clip_min",
    "matmul", "conv2d", "bilinear_resize", "upsample2x_nearest",
    "avg_pool2d", "transpose", "reshape", "concat", "stack", "index_rows",
    "sum_", "mean_", "l1_norm", "batch_stats",
    "grad_check", "grad_check_at", "register_op",
]

ArrayLike = Union[np.ndarray, float, int, Sequence]


class DimensionError(ValueError):
    """Shape or dtype mismatch between operands."""


class ContractError(ValueError):
    """An operation was called outside its contract (non-shape violation)."""


_state = threading.local()

_nan_guard = True


def set_nan_guard(enabled: bool) -> None:
    """Toggle per-op finiteness checking.

    When enabled (the default) every forward op raises ``FloatingPointError``
    if it produces NaN/Inf, naming the op. Disable only for profiling.
    """
    global _nan_guard
    _nan_guard = bool(enabled)


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed differentiable operations.

    Used as a context manager; ops executed inside the ``with`` block are
    recorded. Backward replays entries in exact reverse execution order.
    """

    def __init__(self):
        self.entries = []  # list of (name, out_tensor, backward_fn)

    def record(self, name: str, out: "Tensor", backward_fn) -> None:
        self.entries.append((name, out, backward_fn))

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.entries)

    def first_nonfinite_op(self) -> Optional[str]:
        """Name of the earliest recorded op with a non-finite output, if any."""
        for name, out, _ in self.entries:
            if not np.all(np.isfinite(out.data)):
                return name
        return None


class no_grad:
    """Context manager suppressing tape recording (inference mode)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


def _recording() -> Optional[Tape]:
    stack = _tape_stack()
    if not stack:
        return None
    return stack[-1]  # may be None inside no_grad


class Tensor:
    """Dense array with optional gradient accumulator.

    ``data`` is always a contiguous float32 or float64 numpy array. ``grad``,
    when populated, has identical shape and dtype. Tensors are treated as
    immutable after they appear in a forward computation; parameters are
    mutated only between steps (by the optimizer).
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not arr.flags.c_contiguous:
            # ascontiguousarray would also promote 0-d arrays to shape (1,),
            # so only invoke it when the layout actually needs fixing.
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Constant view of the same data, cut off from the tape."""
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=False)

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
                f"requires_grad={self.requires_grad})")

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return _getitem(self, key)


def tensor(data: ArrayLike, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data: ArrayLike, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(name, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise DimensionError(
            f"{name}: dtype mismatch {a.dtype.name} vs {b.dtype.name}")


def _make(name: str, out_data: np.ndarray, inputs: Iterable[Tensor],
          backward_fn: Optional[Callable]) -> Tensor:
    """Wrap an op result, recording on the active tape when appropriate.

    ``backward_fn(g, acc)`` receives the output gradient and an accumulator
    callback ``acc(tensor, delta)``; it must only report gradients for inputs
    with ``requires_grad``.
    """
    if _nan_guard and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op '{name}'")
    tape = _recording()
    needs = tape is not None and backward_fn is not None and any(
        t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._tape = tape
        tape.record(name, out, backward_fn)
    return out


def register_op(name: str, out_data: np.ndarray, inputs: Sequence[Tensor],
                backward_fn: Callable) -> Tensor:
    """Define a custom differentiable op outside this module.

    Same contract as internal ops: ``backward_fn(g, acc)`` calls
    ``acc(inp, delta)`` for every ``requires_grad`` input.
    """
    return _make(name, out_data, inputs, backward_fn)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    # Reducing a 1-d array with sum(axis=0) yields an immutable numpy
    # scalar; the accumulator needs a real (mutable) 0-d array.
    return np.asarray(g)


# --------------------------------------------------------------------------
# elementwise family
# --------------------------------------------------------------------------

def _binary(name, a, b, fwd, bwd_a, bwd_b):
    a = a if isinstance(a, Tensor) else _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    _check_same_dtype(name, a, b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as e:
        raise DimensionError(
            f"{name}: incompatible shapes {a.shape} and {b.shape}") from e

    def backward_fn(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(bwd_a(g, a.data, b.data), a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(bwd_b(g, a.data, b.data), b.shape))

    return _make(name, out, (a, b), backward_fn)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    return mul(a, s)


def neg(a: Tensor) -> Tensor:
    def backward_fn(g, acc):
        acc(a, -g)
    return _make("neg", -a.data, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is 0

    def backward_fn(g, acc):
        acc(a, g * mask)

    return _make("relu", np.where(mask, a.data, 0), (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward_fn(g, acc):
        acc(a, g * out * (1.0 - out))

    return _make("sigmoid", out, (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward_fn(g, acc):
        acc(a, g * (1.0 - out * out))

    return _make("tanh", out, (a,), backward_fn)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)  # sign(0) = 0, matching relu'(0) = 0

    def backward_fn(g, acc):
        acc(a, g * sign)

    return _make("abs", np.abs(a.data), (a,), backward_fn)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward_fn(g, acc):
        acc(a, g * (0.5 / out))

    return _make("sqrt", out, (a,), backward_fn)


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    mask = a.data > floor

    def backward_fn(g, acc):
        acc(a, g * mask)

    return _make("clip_min", np.maximum(a.data, floor), (a,), backward_fn)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g, acc):
        ga = np.asarray(g)
        if axis is not None and not keepdims:
            ga = np.expand_dims(ga, axis)
        acc(a, np.broadcast_to(ga, a.shape).copy())

    return _make("sum", np.asarray(out), (a,), backward_fn)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def l1_norm(a: Tensor) -> Tensor:
    """Sum of absolute values (the L1 norm, not the mean)."""
    sign = np.sign(a.data)

    def backward_fn(g, acc):
        acc(a, np.asarray(g) * sign)

    return _make("l1_norm", np.asarray(np.abs(a.data).sum()), (a,), backward_fn)


# --------------------------------------------------------------------------
# linear algebra and convolution
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward_fn(g, acc):
        if a.requires_grad:
            acc(a, g @ b.data.T)
        if b.requires_grad:
            acc(b, a.data.T @ g)

    return _make("matmul", out, (a, b), backward_fn)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with an OCkk kernel.

    Kernel sides must be odd and (H + 2*padding - kh) divisible by stride.
    Computed directly, blocked over the kh*kw kernel offsets.
    """
    _check_same_dtype("conv2d", x, k)
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(
            f"conv2d: need 4-D input and kernel, got {x.shape} and {k.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = k.shape
    if ci != c:
        raise DimensionError(
            f"conv2d: channel mismatch, input {x.shape} vs kernel {k.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel sides must be odd, got {kh}x{kw}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise DimensionError(
            f"conv2d: stride {stride}/padding {padding} does not divide "
            f"input {h}x{w} with kernel {kh}x{kw}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding),
                             (padding, padding)))
    else:
        xp = x.data
    kd = k.data
    # Contractions run through tensordot so they hit BLAS; the plain einsum
    # path evaluates these loops in C without vendor kernels and dominates
    # the training-step profile.
    out = np.zeros((n, co, ho, wo), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            xs = xp[:, :, a:a + (ho - 1) * stride + 1:stride,
                    b:b + (wo - 1) * stride + 1:stride]
            out += np.tensordot(xs, kd[:, :, a, b],
                                axes=([1], [1])).transpose(0, 3, 1, 2)

    def backward_fn(g, acc):
        if k.requires_grad:
            dk = np.zeros_like(kd)
            for a in range(kh):
                for b in range(kw):
                    xs = xp[:, :, a:a + (ho - 1) * stride + 1:stride,
                            b:b + (wo - 1) * stride + 1:stride]
                    dk[:, :, a, b] = np.tensordot(
                        g, xs, axes=([0, 2, 3], [0, 2, 3]))
            acc(k, dk)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    dxp[:, :, a:a + (ho - 1) * stride + 1:stride,
                        b:b + (wo - 1) * stride + 1:stride] += np.tensordot(
                            g, kd[:, :, a, b],
                            axes=([1], [0])).transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            acc(x, dxp)

    return _make("conv2d", out, (x, k), backward_fn)


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

def _resize_coords(in_size: int, out_size: int, align_corners: bool):
    """Source coordinates (float) for each output index along one axis."""
    i = np.arange(out_size, dtype=np.float64)
    if align_corners:
        if out_size == 1:
            src = np.zeros(1)
        else:
            src = i * (in_size - 1) / (out_size - 1)
    else:
        src = (i + 0.5) * in_size / out_size - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    lo = np.minimum(lo, in_size - 1)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int,
                    align_corners: bool = False) -> Tensor:
    """Bilinear resize of the trailing two axes; differentiable in x."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: bad output {out_h}x{out_w}")
    if x.ndim < 2:
        raise DimensionError(f"bilinear_resize: need >= 2-D, got {x.shape}")
    *lead, h, w = x.shape
    nb = int(np.prod(lead)) if lead else 1
    flat = x.data.reshape(nb, h, w)

    y0, y1, fy = _resize_coords(h, out_h, align_corners)
    x0, x1, fx = _resize_coords(w, out_w, align_corners)
    wy0 = (1.0 - fy)[:, None]
    wy1 = fy[:, None]
    wx0 = (1.0 - fx)[None, :]
    wx1 = fx[None, :]
    w00 = (wy0 * wx0).astype(x.dtype)
    w01 = (wy0 * wx1).astype(x.dtype)
    w10 = (wy1 * wx0).astype(x.dtype)
    w11 = (wy1 * wx1).astype(x.dtype)
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]

    out = (w00 * flat[:, Y0, X0] + w01 * flat[:, Y0, X1] +
           w10 * flat[:, Y1, X0] + w11 * flat[:, Y1, X1])
    out = out.reshape(*lead, out_h, out_w)

    def backward_fn(g, acc):
        gf = g.reshape(nb, out_h, out_w)
        d = np.zeros((nb, h * w), dtype=x.dtype)
        bidx = np.arange(nb)[:, None, None]
        for wgt, yy, xx in ((w00, Y0, X0), (w01, Y0, X1),
                            (w10, Y1, X0), (w11, Y1, X1)):
            np.add.at(d, (bidx, yy * w + xx), wgt * gf)
        acc(x, d.reshape(x.shape))

    return _make("bilinear_resize", out, (x,), backward_fn)


def upsample2x_nearest(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsample of the trailing two axes (cheap adjoint)."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    *lead, h, w = x.shape

    def backward_fn(g, acc):
        acc(x, g.reshape(*lead, h, 2, w, 2).sum(axis=(-1, -3)))

    return _make("upsample2x", out, (x,), backward_fn)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    *lead, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    hd, wd = h // k, w // k
    out = x.data.reshape(*lead, hd, k, wd, k).mean(axis=(-1, -3))

    def backward_fn(g, acc):
        ge = np.broadcast_to(
            g.reshape(*lead, hd, 1, wd, 1), (*lead, hd, k, wd, k))
        acc(x, (ge / (k * k)).reshape(x.shape).astype(x.dtype))

    return _make("avg_pool2d", out, (x,), backward_fn)


# --------------------------------------------------------------------------
# shape / gather ops
# --------------------------------------------------------------------------

def transpose(a: Tensor) -> Tensor:
    """Transpose of a 2-D tensor."""
    if a.ndim != 2:
        raise DimensionError(f"transpose: need 2-D, got {a.shape}")

    def backward_fn(g, acc):
        acc(a, np.ascontiguousarray(g.T))

    return _make("transpose", np.ascontiguousarray(a.data.T), (a,),
                 backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def backward_fn(g, acc):
        acc(a, g.reshape(a.shape))

    return _make("reshape", out, (a,), backward_fn)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat: empty input list")
    for p in parts[1:]:
        _check_same_dtype("concat", parts[0], p)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]

    def backward_fn(g, acc):
        offset = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + s)
                acc(p, g[tuple(sl)])
            offset += s

    return _make("concat", out, tuple(parts), backward_fn)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([p.data for p in parts], axis=axis)

    def backward_fn(g, acc):
        for i, p in enumerate(parts):
            if p.requires_grad:
                acc(p, np.take(g, i, axis=axis))

    return _make("stack", out, tuple(parts), backward_fn)


def index_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor (embedding lookup); grads scatter-add."""
    if a.ndim != 2:
        raise DimensionError(f"index_rows: need 2-D table, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"index_rows: need 1-D indices, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(
            f"index_rows: index out of range for table with {a.shape[0]} rows")
    out = a.data[idx]

    def backward_fn(g, acc):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        acc(a, da)

    return _make("index_rows", out, (a,), backward_fn)


def _getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward_fn(g, acc):
        da = np.zeros_like(a.data)
        da[key] += g
        acc(a, da)

    return _make("getitem", np.ascontiguousarray(out), (a,), backward_fn)


def place_patch(patch: Tensor, out_hw, rect) -> Tensor:
    """Write a 2-D patch into a zero canvas at integer rect (r0,c0,r1,c1)."""
    r0, c0, r1, c1 = rect
    hh, ww = out_hw
    if patch.shape != (r1 - r0, c1 - c0):
        raise DimensionError(
            f"place_patch: patch {patch.shape} vs rect {rect}")
    out = np.zeros((hh, ww), dtype=patch.dtype)
    out[r0:r1, c0:c1] = patch.data

    def backward_fn(g, acc):
        acc(patch, g[r0:r1, c0:c1])

    return _make("place_patch", out, (patch,), backward_fn)


# --------------------------------------------------------------------------
# batch statistics (Eq. 2 ingredients)
# --------------------------------------------------------------------------

def batch_stats(x: Tensor, eps: float = 1e-5):
    """Channel-wise mean and std (sqrt(var + eps)) over (batch, h, w).

    Returns ``(mu, sigma)`` as (C,)-shaped tensors, both differentiable.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_stats: need NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if n * h * w < 1:
        raise DimensionError(f"batch_stats: empty tensor {x.shape}")
    mu = mean_(x, axis=(0, 2, 3))
    xc = sub(x, reshape(mu, (1, c, 1, 1)))
    var = mean_(mul(xc, xc), axis=(0, 2, 3))
    sigma = sqrt(add(var, constant(np.full(c, eps, dtype=x.dtype))))
    return mu, sigma


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate grads of every contributing ``requires_grad`` tensor.

    Walks the recording tape in exact reverse execution order. Repeated calls
    without resetting grads accumulate (each call adds one full gradient).
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("backward: loss is not connected to a tape")

    gm: dict = {loss: np.ones_like(loss.data)}
    owned = {id(gm[loss])}

    def acc(t: Tensor, delta: np.ndarray) -> None:
        if not isinstance(delta, np.ndarray):
            # A backward rule may hand over a numpy scalar (for example a
            # full reduction); in-place accumulation onto one is silently
            # lost, so normalize to a 0-d array first.
            delta = np.asarray(delta)
        cur = gm.get(t)
        if cur is None:
            # Store a buffer this map exclusively owns: passthrough backward
            # closures may hand the same array to several inputs, and a later
            # in-place accumulation must never leak into another entry.
            if not delta.flags.owndata or id(delta) in owned:
                delta = delta.copy()
            gm[t] = delta
            owned.add(id(delta))
        else:
            cur += delta

    for name, out, backward_fn in reversed(tape.entries):
        g = gm.get(out)
        if g is None:
            continue
        backward_fn(g, acc)

    for t, g in gm.items():
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error of autodiff vs central differences over all coords.

    ``f`` maps a tensor to a scalar tensor; must be deterministic. The
    denominator of the relative error is ``max(|a|, |b|, 1e-8)``.
    """
    coords = list(np.ndindex(*x.shape)) if x.ndim else [()]
    return grad_check_at(f, x, coords, h=h)


def grad_check_at(f, x: Tensor, coords, h: float = 1e-5) -> float:
    """grad_check restricted to a list of coordinates of ``x``."""
    x.grad = None
    with Tape():
        y = f(x)
        backward(y)
    if x.grad is None:
        raise ContractError("grad_check: f does not depend on x")
    ad = x.grad.copy()
    x.grad = None

    worst = 0.0
    for idx in coords:
        orig = x.data[idx]
        x.data[idx] = orig + h
        fp = f(x).item()
        x.data[idx] = orig - h
        fm = f(x).item()
        x.data[idx] = orig
        fd = (fp - fm) / (2.0 * h)
        worst = max(worst, _rel_err(float(ad[idx]), fd))
    return worst
