"""Dense float tensors with reverse-mode automatic differentiation.

A minimal engine covering exactly what the restoration model needs: matrix
products (plain and stacked), GELU, layer norm, row softmax, 2-D convolution,
nearest upsampling, layout ops, and scalar reductions.  Operations record
onto an explicit ComputationTape; one backward pass walks the tape in reverse
and accumulates gradients into every requires_grad leaf.

float32 is the working precision; float64 exists for finite-difference
gradient checking.  No broadcasting beyond the bias-add patterns implemented
here; all other operand shapes must match exactly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

F32 = np.float32
F64 = np.float64

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


class TensorError(Exception):
    """Base class for tensor-core errors."""


class DimensionError(TensorError):
    """Operand shapes are incompatible."""


class NonFiniteError(TensorError):
    """A NaN or Inf value was stored into a tensor."""


class UsageError(TensorError):
    """API misuse (e.g. backward on a non-scalar)."""


_allow_nonfinite = False


@contextlib.contextmanager
def allow_nonfinite():
    """Debug flag: permit NaN/Inf tensor values inside the block."""
    global _allow_nonfinite
    prev = _allow_nonfinite
    _allow_nonfinite = True
    try:
        yield
    finally:
        _allow_nonfinite = prev


def _check_finite(arr: np.ndarray) -> None:
    if _allow_nonfinite or arr.size == 0:
        return
    # min/max both propagate NaN and catch +-Inf in two allocation-free passes
    if not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise NonFiniteError(f"non-finite values in tensor of shape {tuple(arr.shape)}")


class Tensor:
    """An n-dimensional float32/float64 array, optionally tracked for autodiff.

    `grad` is populated on leaves by Tape.backward and accumulates across
    repeated backward calls until zero_grad().
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (F32, F64):
            arr = arr.astype(F32)
        _check_finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None  # tape that recorded this tensor, if any

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

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
        if self.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise UsageError("tensor is not connected to a tape")
        self._tape.backward(self)

    # operator sugar; all routed through the module-level ops
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of operations for one reverse pass.

    Execution order is topological by construction: an operation's inputs are
    always recorded (or are leaves) before its output.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, backward_fn: Callable) -> None:
        out._tape = self
        out.requires_grad = True
        self._nodes.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf."""
        if loss.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise UsageError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}

        def accum(t: Tensor, g: np.ndarray) -> None:
            if not t.requires_grad:
                return
            key = id(t)
            cur = grads.get(key)
            grads[key] = g if cur is None else cur + g
            if t._tape is not self:
                leaves[key] = t

        for out, fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            fn(g, accum)
        for key, t in leaves.items():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            t.grad += grads[key]


def _tape_for(*inputs: Tensor) -> Tape | None:
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        return _ACTIVE_TAPES[-1]
    return None


def _same_dtype(*ts: Tensor) -> None:
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise DimensionError(f"mixed dtypes {dt} and {t.data.dtype}")


def _out(data: np.ndarray) -> Tensor:
    return Tensor(data)


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or of equal-length stacks of them."""
    _same_dtype(a, b)
    if a.ndim == 2 and b.ndim == 2:
        ok = a.shape[1] == b.shape[0]
    elif a.ndim == 3 and b.ndim == 3:
        ok = a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]
    else:
        ok = False
    if not ok:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = _out(a.data @ b.data)
    tape = _tape_for(a, b)
    if tape is not None:
        ad, bd = a.data, b.data

        def bwd(g, accum):
            accum(a, g @ _swap_last(bd))
            accum(b, _swap_last(ad) @ g)

        tape._record(out, bwd)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = _out(a.data + b.data)
    tape = _tape_for(a, b)
    if tape is not None:

        def bwd(g, accum):
            accum(a, g)
            accum(b, g)

        tape._record(out, bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = _out(a.data - b.data)
    tape = _tape_for(a, b)
    if tape is not None:

        def bwd(g, accum):
            accum(a, g)
            accum(b, -g)

        tape._record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = _out(a.data * b.data)
    tape = _tape_for(a, b)
    if tape is not None:
        ad, bd = a.data, b.data

        def bwd(g, accum):
            accum(a, g * bd)
            accum(b, g * ad)

        tape._record(out, bwd)
    return out


def scale(x: Tensor, s: float) -> Tensor:
    out = _out(x.data * x.data.dtype.type(s))
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, accum):
            accum(x, g * g.dtype.type(s))

        tape._record(out, bwd)
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x + bias broadcast over the last axis; bias must be 1-D of width x.shape[-1]."""
    _same_dtype(x, bias)
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} + {bias.shape}")
    out = _out(x.data + bias.data)
    tape = _tape_for(x, bias)
    if tape is not None:
        lead = tuple(range(x.ndim - 1))

        def bwd(g, accum):
            accum(x, g)
            accum(bias, g.sum(axis=lead))

        tape._record(out, bwd)
    return out


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    xd = x.data
    phi_cdf = 0.5 * (1.0 + erf(xd * xd.dtype.type(_INV_SQRT2)))
    out = _out(xd * phi_cdf)
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, accum):
            pdf = np.exp(-0.5 * xd * xd) * xd.dtype.type(_INV_SQRT2PI)
            accum(x, g * (phi_cdf + xd * pdf))

        tape._record(out, bwd)
    return out


def absolute(x: Tensor) -> Tensor:
    """Elementwise |x|; subgradient at 0 is 0."""
    out = _out(np.abs(x.data))
    tape = _tape_for(x)
    if tape is not None:
        sgn = np.sign(x.data)

        def bwd(g, accum):
            accum(x, g * sgn)

        tape._record(out, bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _out(np.asarray(x.data.sum(), dtype=x.data.dtype))
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, accum):
            accum(x, np.broadcast_to(g, x.shape).astype(g.dtype, copy=True))

        tape._record(out, bwd)
    return out


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# normalization and attention primitives


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis (population variance), then affine."""
    if eps <= 0:
        raise UsageError("layer_norm: eps must be positive")
    _same_dtype(x, gamma, beta)
    c = x.shape[-1]
    if x.ndim < 2 or gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm: x {x.shape} with gamma {gamma.shape}, beta {beta.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    out = _out(xhat * gamma.data + beta.data)
    tape = _tape_for(x, gamma, beta)
    if tape is not None:
        lead = tuple(range(x.ndim - 1))
        gd = gamma.data

        def bwd(g, accum):
            accum(gamma, (g * xhat).sum(axis=lead))
            accum(beta, g.sum(axis=lead))
            dxhat = g * gd
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
            )
            accum(x, dx)

        tape._record(out, bwd)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Max-subtracted softmax over the last axis; every row sums to 1.

    The denominator is accumulated in ascending value order, so the result is
    bit-identical under any permutation of a row's entries.
    """
    if x.ndim < 2:
        raise DimensionError(f"softmax_rows: need ndim >= 2, got {x.shape}")
    xd = x.data
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    denom = np.sort(e, axis=-1).sum(axis=-1, keepdims=True)
    y = e / denom
    out = _out(y)
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, accum):
            accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

        tape._record(out, bwd)
    return out


def attention_mix(weights: Tensor, values: Tensor) -> Tensor:
    """Stacked matmul weights @ values with one-level-up accumulation.

    Same contract as 3-D matmul; the key-axis reduction happens in the next
    wider dtype so the downcast result does not depend on key order.
    """
    _same_dtype(weights, values)
    if (
        weights.ndim != 3
        or values.ndim != 3
        or weights.shape[0] != values.shape[0]
        or weights.shape[2] != values.shape[1]
    ):
        raise DimensionError(
            f"attention_mix: incompatible shapes {weights.shape} @ {values.shape}"
        )
    dt = weights.data.dtype
    hi = F64 if dt == F32 else np.longdouble
    wd = weights.data.astype(hi)
    vd = values.data.astype(hi)
    out = _out((wd @ vd).astype(dt))
    tape = _tape_for(weights, values)
    if tape is not None:

        def bwd(g, accum):
            gh = g.astype(hi)
            accum(weights, (gh @ _swap_last(vd)).astype(dt))
            accum(values, (_swap_last(wd) @ gh).astype(dt))

        tape._record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# convolution and resampling


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation conv over (..., c_in, h, w) with k in {1, 3}.

    k=3 uses zero padding 1, so stride 1 preserves h x w and stride 2 halves
    them.  Accepts a single feature map (3-D) or a batch (4-D).
    """
    _same_dtype(x, kernel, bias)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv2d: bad kernel shape {kernel.shape}")
    k = kernel.shape[2]
    if k not in (1, 3):
        raise DimensionError(f"conv2d: kernel size {k} not in (1, 3)")
    if stride not in (1, 2):
        raise UsageError(f"conv2d: stride {stride} not in (1, 2)")
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be 3-D or 4-D, got {x.shape}")
    c_out, c_in = kernel.shape[0], kernel.shape[1]
    if x.shape[-3] != c_in:
        raise DimensionError(
            f"conv2d: input channels {x.shape[-3]} != kernel channels {c_in}"
        )
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")

    xd = x.data[None] if squeeze else x.data
    b, _, h, w = xd.shape
    pad = 1 if k == 3 else 0
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    # (b, c_in, ho, wo, k, k) windows -> (b*ho*wo, c_in*k*k) for one GEMM
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    if stride == 2:
        win = win[:, :, ::2, ::2]
    ho, wo = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * ho * wo, c_in * k * k
    )
    wmat = kernel.data.reshape(c_out, c_in * k * k).T
    ymat = cols @ wmat + bias.data
    y = ymat.reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = _out(y[0] if squeeze else y)
    tape = _tape_for(x, kernel, bias)
    if tape is not None:

        def bwd(g, accum):
            gd = g[None] if squeeze else g
            gmat = np.ascontiguousarray(gd.transpose(0, 2, 3, 1)).reshape(
                b * ho * wo, c_out
            )
            accum(bias, gmat.sum(axis=0))
            accum(kernel, (cols.T @ gmat).T.reshape(c_out, c_in, k, k))
            dcols = (gmat @ wmat.T).reshape(b, ho, wo, c_in, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            accum(x, dx[0] if squeeze else dx)

        tape._record(out, bwd)
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of (..., c, h, w)."""
    if x.ndim not in (3, 4):
        raise DimensionError(f"upsample2x: input must be 3-D or 4-D, got {x.shape}")
    out = _out(np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1))
    tape = _tape_for(x)
    if tape is not None:
        h, w = x.shape[-2], x.shape[-1]

        def bwd(g, accum):
            gs = g.reshape(*g.shape[:-2], h, 2, w, 2).sum(axis=(-3, -1))
            accum(x, gs)

        tape._record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# layout


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size and -1 not in shape:
        raise DimensionError(f"reshape: {x.shape} -> {shape} changes element count")
    out = _out(x.data.reshape(shape))
    tape = _tape_for(x)
    if tape is not None:
        orig = x.shape

        def bwd(g, accum):
            accum(x, g.reshape(orig))

        tape._record(out, bwd)
    return out


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Axis permutation; default reverses all axes (matrix transpose for 2-D)."""
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) for a in axes)
    out = _out(np.ascontiguousarray(x.data.transpose(axes)))
    tape = _tape_for(x)
    if tape is not None:
        inv = tuple(np.argsort(axes))

        def bwd(g, accum):
            accum(x, np.ascontiguousarray(g.transpose(inv)))

        tape._record(out, bwd)
    return out


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise UsageError("concat: empty input list")
    _same_dtype(*xs)
    nd = xs[0].ndim
    axis = axis % nd
    for t in xs[1:]:
        if t.ndim != nd or any(
            t.shape[a] != xs[0].shape[a] for a in range(nd) if a != axis
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in xs]} differ off axis {axis}"
            )
    out = _out(np.concatenate([t.data for t in xs], axis=axis))
    tape = _tape_for(*xs)
    if tape is not None:
        sizes = [t.shape[axis] for t in xs]
        bounds = np.cumsum(sizes)[:-1]

        def bwd(g, accum):
            for t, piece in zip(xs, np.split(g, bounds, axis=axis)):
                accum(t, piece)

        tape._record(out, bwd)
    return out


def split(x: Tensor, sizes: Sequence[int], axis: int) -> tuple[Tensor, ...]:
    """Split along axis into consecutive chunks whose sizes must sum exactly."""
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(
            f"split: sizes {list(sizes)} do not sum to axis {axis} of {x.shape}"
        )
    bounds = np.cumsum(sizes)[:-1]
    pieces = np.split(x.data, bounds, axis=axis)
    outs = tuple(_out(np.ascontiguousarray(p)) for p in pieces)
    tape = _tape_for(x)
    if tape is not None:
        offset = 0
        for piece_out, size in zip(outs, sizes):
            sl = [slice(None)] * x.ndim
            sl[axis] = slice(offset, offset + size)
            sl = tuple(sl)

            def bwd(g, accum, sl=sl):
                full = np.zeros(x.shape, dtype=g.dtype)
                full[sl] = g
                accum(x, full)

            tape._record(piece_out, bwd)
            offset += size
    return outs


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate token matrices along the token axis (second-to-last)."""
    return concat([a, b], axis=a.ndim - 2)


def split_rows(x: Tensor, sizes: Sequence[int]) -> tuple[Tensor, ...]:
    return split(x, sizes, axis=x.ndim - 2)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate feature maps along the channel axis (third-from-last)."""
    return concat([a, b], axis=a.ndim - 3)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select token rows by index along the second-to-last axis (with repeats)."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"gather_rows: index must be 1-D, got {idx.shape}")
    axis = x.ndim - 2
    out = _out(np.take(x.data, idx, axis=axis))
    tape = _tape_for(x)
    if tape is not None:

        def bwd(g, accum):
            full = np.zeros(x.shape, dtype=g.dtype)
            mg = np.moveaxis(full, axis, 0)
            np.add.at(mg, idx, np.moveaxis(g, axis, 0))
            accum(x, full)

        tape._record(out, bwd)
    return out


def backward(loss: Tensor) -> None:
    """Reverse pass from a scalar loss over its recording tape."""
    loss.backward()
