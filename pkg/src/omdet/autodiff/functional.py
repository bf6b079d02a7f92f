"""Differentiable primitives.

Each primitive computes its forward value with numpy, validates that the
result is finite, and (when a tape is active and an input requires grad)
records a closure computing the vector-Jacobian product for every input.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import erf, expit

from omdet.autodiff.tensor import Node, Tensor, as_tensor, current_tape
from omdet.errors import NumericError, ShapeError, UsageError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _emit(name: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericError(f"primitive {name!r} produced non-finite output")
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        res = Tensor._wrap(out, True)
        tape.record(Node(name, tuple(inputs), res, backward))
        return res
    return Tensor._wrap(out, False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shapes(name: str, *tensors: Tensor) -> None:
    try:
        np.broadcast_shapes(*(t.shape for t in tensors))
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"{name}: shapes {shapes} are not broadcast-compatible") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("add", a, b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("sub", a, b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("mul", a, b)

    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _emit("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g, needs):
        ga = _unbroadcast(g / b.data, a.shape) if needs[0] else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None
        return ga, gb

    return _emit("div", out, (a, b), bw)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _emit("neg", -x.data, (x,), lambda g, n: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g, n: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _emit("log", out, (x,), lambda g, n: (g / x.data,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _emit("sqrt", out, (x,), lambda g, n: (g * 0.5 / out,))


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = x.data**p
    if p == 0:
        return _emit("power", np.ones_like(x.data), (x,), lambda g, n: (np.zeros_like(g),))

    def bw(g, needs):
        with np.errstate(invalid="ignore", divide="ignore"):
            gx = g * p * x.data ** (p - 1)
        return (gx,)

    return _emit("power", out, (x,), bw)


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _emit("abs", np.abs(x.data), (x,), lambda g, n: (g * np.sign(x.data),))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("maximum", a, b)
    pick_a = a.data >= b.data

    def bw(g, needs):
        return (_unbroadcast(np.where(pick_a, g, 0), a.shape) if needs[0] else None,
                _unbroadcast(np.where(pick_a, 0, g), b.shape) if needs[1] else None)

    return _emit("maximum", np.where(pick_a, a.data, b.data), (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("minimum", a, b)
    pick_a = a.data <= b.data

    def bw(g, needs):
        return (_unbroadcast(np.where(pick_a, g, 0), a.shape) if needs[0] else None,
                _unbroadcast(np.where(pick_a, 0, g), b.shape) if needs[1] else None)

    return _emit("minimum", np.where(pick_a, a.data, b.data), (a, b), bw)


def clip(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _emit("clip", out, (x,), lambda g, n: (np.where(inside, g, 0),))


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``mask`` is true, else ``b``; mask is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data).astype(a.dtype, copy=False)

    def bw(g, needs):
        return (_unbroadcast(np.where(mask, g, 0), a.shape) if needs[0] else None,
                _unbroadcast(np.where(mask, 0, g), b.shape) if needs[1] else None)

    return _emit("where", out, (a, b), bw)


# ---------------------------------------------------------------- activations


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _emit("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g, n: (g * pos,))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out = (x.data * cdf).astype(x.dtype)

    def bw(g, needs):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _emit("gelu", out, (x,), bw)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = expit(x.data).astype(x.dtype)
    return _emit("sigmoid", out, (x,), lambda g, n: (g * out * (1 - out),))


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    x = as_tensor(x)
    out = (-np.logaddexp(0, -x.data)).astype(x.dtype)
    return _emit("log_sigmoid", out, (x,), lambda g, n: (g * expit(-x.data),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), lambda g, n: (g * (1 - out * out),))


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight exactly 0.

    A slice with every entry masked yields all zeros (it attends to nothing).
    """
    x = as_tensor(x)
    if mask is None:
        z = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        z = np.where(mask, x.data, -np.inf)
        m = z.max(axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0)
        e = np.where(mask, np.exp(np.where(mask, x.data, 0) - m), 0)
        s = e.sum(axis=axis, keepdims=True)
        out = e / np.where(s == 0, 1, s)
    out = out.astype(x.dtype, copy=False)

    def bw(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def bw(g, needs):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if needs[0] else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if needs[1] else None
        return ga, gb

    return _emit("matmul", out, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in_features, out_features)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        inputs.append(bias)
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))

    def bw(g, needs):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if needs[0] else None
        gw = x2.T @ g2 if needs[1] else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if needs[2] else None)
        return grads

    return _emit("linear", out, inputs, bw)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        xp.shape[0] * ho * wo, -1
    )


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col + matmul. x: (B,C,H,W), weight: (O,C,kh,kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    bsz, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {cout} output channels")
        out = out + bias.data
        inputs.append(bias)
    out = np.ascontiguousarray(out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2))

    def bw(g, needs):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if needs[1]:
            gw = (g2.T @ cols).reshape(weight.shape)
        if needs[0]:
            gcols = (g2 @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is not None and needs[2]:
            gb = g2.sum(axis=0)
        return [gx, gw] + ([gb] if bias is not None else [])

    return _emit("conv2d", out, inputs, bw)


# ---------------------------------------------------------------- normalization


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an optional affine map."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    inputs = [x]
    if weight is not None:
        weight = as_tensor(weight)
        if weight.shape != (x.shape[-1],):
            raise ShapeError(f"layer_norm: weight {weight.shape} vs features {x.shape[-1]}")
        out = out * weight.data
        inputs.append(weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (x.shape[-1],):
            raise ShapeError(f"layer_norm: bias {bias.shape} vs features {x.shape[-1]}")
        out = out + bias.data
        inputs.append(bias)

    def bw(g, needs):
        lead = tuple(range(x.ndim - 1))
        grads = []
        gxhat = g * weight.data if weight is not None else g
        if needs[0]:
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
            grads.append(gx)
        else:
            grads.append(None)
        if weight is not None:
            grads.append((g * xhat).sum(axis=lead) if needs[len(grads)] else None)
        if bias is not None:
            grads.append(g.sum(axis=lead) if needs[len(grads)] else None)
        return grads

    return _emit("layer_norm", out, inputs, bw)


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """GroupNorm for (B, C, H, W) inputs with a per-channel affine map."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] % groups:
        raise ShapeError(f"group_norm: {x.shape} cannot be split into {groups} groups")
    bsz, c, h, w = x.shape
    xg = x.data.reshape(bsz, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    out = xhat
    inputs = [x]
    if weight is not None:
        weight = as_tensor(weight)
        out = out * weight.data.reshape(1, c, 1, 1)
        inputs.append(weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, c, 1, 1)
        inputs.append(bias)

    def bw(g, needs):
        grads = []
        gxhat = g * weight.data.reshape(1, c, 1, 1) if weight is not None else g
        if needs[0]:
            gh = gxhat.reshape(bsz, groups, -1)
            xh = xhat.reshape(bsz, groups, -1)
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xh * (gh * xh).mean(axis=-1, keepdims=True))
            grads.append(gx.reshape(x.shape))
        else:
            grads.append(None)
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)) if needs[len(grads)] else None)
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if needs[len(grads)] else None)
        return grads

    return _emit("group_norm", out, inputs, bw)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    out = x.data / safe

    def bw(g, needs):
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(norm > eps, (g - out * proj) / safe, g / safe),)

    return _emit("l2_normalize", out, (x,), bw)


def cosine_similarity(a, b, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of corresponding vectors along ``axis`` (broadcasting)."""
    return sum(mul(l2_normalize(a, axis, eps), l2_normalize(b, axis, eps)), axis=axis)


# ---------------------------------------------------------------- shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _emit("reshape", out, (x,), lambda g, n: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _emit("transpose", out, (x,), lambda g, n: (np.ascontiguousarray(g.transpose(inv)),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} disagree off axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g, needs):
        return np.split(g, bounds, axis=axis)

    return _emit("concat", out, tensors, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x, index) -> Tensor:
    """Indexing/slicing; fancy indices with repeats accumulate their gradient."""
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as e:
        raise ShapeError(f"slice: {e} for shape {x.shape}") from None
    out = np.ascontiguousarray(out)
    basic = _is_basic_index(index)

    def bw(g, needs):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _emit("slice", out, (x,), bw)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with a 1-D integer index array (repeats allowed)."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.ndim != 1:
        raise ShapeError(f"take: indices must be 1-D, got shape {indices.shape}")
    if indices.size and (indices.min() < -x.shape[axis] or indices.max() >= x.shape[axis]):
        raise ShapeError(f"take: index out of range for axis {axis} of {x.shape}")
    out = np.take(x.data, indices, axis=axis)

    def bw(g, needs):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (gx,)

    return _emit("take", out, (x,), bw)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing spatial axes."""
    x = as_tensor(x)
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bw(g, needs):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor, factor))
        return (g.sum(axis=(-3, -1)),)

    return _emit("upsample_nearest", out, (x,), bw)


# ---------------------------------------------------------------- reductions


def _expand(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _emit("sum", out, (x,), lambda g, n: (np.array(_expand(g, x.shape, axis, keepdims)),))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // max(out.size, 1)

    def bw(g, needs):
        return (np.array(_expand(g / count, x.shape, axis, keepdims)),)

    return _emit("mean", out, (x,), bw)


# ---------------------------------------------------------------- sampling


def bilinear_sample(features, batch_index: np.ndarray, xs, ys) -> Tensor:
    """Sample ``features`` (B,C,H,W) at continuous pixel coordinates.

    Uses the RoIAlign convention: integer coordinates hit pixel centres, points
    further than one pixel outside the map read zero, and points in the border
    band are clamped (their coordinate gradient is zero there). Returns (M, C);
    differentiable with respect to the features and both coordinate vectors.
    """
    features, xs, ys = as_tensor(features), as_tensor(xs), as_tensor(ys)
    batch_index = np.asarray(batch_index, dtype=np.intp)
    if features.ndim != 4:
        raise ShapeError(f"bilinear_sample: features must be (B,C,H,W), got {features.shape}")
    if not (xs.shape == ys.shape == batch_index.shape) or xs.ndim != 1:
        raise ShapeError(
            f"bilinear_sample: coordinate shapes {xs.shape}, {ys.shape}, {batch_index.shape} differ"
        )
    bsz, c, h, w = features.shape
    m = xs.shape[0]
    dtype = features.dtype
    x = xs.data.astype(np.float64)
    y = ys.data.astype(np.float64)
    valid = (y >= -1.0) & (y <= h) & (x >= -1.0) & (x <= w)
    xc = np.maximum(x, 0.0)
    yc = np.maximum(y, 0.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x_edge = x0 >= w - 1
    y_edge = y0 >= h - 1
    x0 = np.where(x_edge, w - 1, x0)
    y0 = np.where(y_edge, h - 1, y0)
    x1 = np.where(x_edge, x0, x0 + 1)
    y1 = np.where(y_edge, y0, y0 + 1)
    xc = np.where(x_edge, x0, xc)
    yc = np.where(y_edge, y0, yc)
    lx, ly = xc - x0, yc - y0
    hx, hy = 1.0 - lx, 1.0 - ly
    vf = valid.astype(np.float64)
    base = batch_index * (h * w)
    cols = np.stack([base + y0 * w + x0, base + y0 * w + x1, base + y1 * w + x0, base + y1 * w + x1], 1)
    rows = np.repeat(np.arange(m), 4)
    wts = np.stack([hy * hx, hy * lx, ly * hx, ly * lx], 1) * vf[:, None]
    flat = np.ascontiguousarray(features.data.transpose(0, 2, 3, 1)).reshape(bsz * h * w, c)
    interp = sp.csr_matrix((wts.reshape(-1).astype(dtype), (rows, cols.reshape(-1))), shape=(m, bsz * h * w))
    out = np.asarray(interp @ flat, dtype=dtype).reshape(m, c)

    def bw(g, needs):
        gf = gx = gy = None
        if needs[0]:
            gflat = np.asarray(interp.T @ g.astype(dtype))
            gf = np.ascontiguousarray(gflat.reshape(bsz, h, w, c).transpose(0, 3, 1, 2))
        if needs[1]:
            dx_ok = vf * (x > 0) * (~x_edge)
            dwx = np.stack([-hy, hy, -ly, ly], 1) * dx_ok[:, None]
            dmat = sp.csr_matrix((dwx.reshape(-1).astype(dtype), (rows, cols.reshape(-1))), shape=interp.shape)
            gx = (np.asarray(dmat @ flat) * g).sum(axis=1).astype(dtype)
        if needs[2]:
            dy_ok = vf * (y > 0) * (~y_edge)
            dwy = np.stack([-hx, -lx, hx, lx], 1) * dy_ok[:, None]
            dmat = sp.csr_matrix((dwy.reshape(-1).astype(dtype), (rows, cols.reshape(-1))), shape=interp.shape)
            gy = (np.asarray(dmat @ flat) * g).sum(axis=1).astype(dtype)
        return gf, gx, gy

    return _emit("bilinear_sample", out, (features, xs, ys), bw)


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "power": power,
    "abs": abs,
    "maximum": maximum,
    "minimum": minimum,
    "clip": clip,
    "where": where,
    "matmul": matmul,
    "linear": linear,
    "conv2d": conv2d,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "tanh": tanh,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "group_norm": group_norm,
    "l2_normalize": l2_normalize,
    "cosine_similarity": cosine_similarity,
    "concat": concat,
    "stack": stack,
    "slice": getitem,
    "take": take,
    "reshape": reshape,
    "transpose": transpose,
    "upsample_nearest": upsample_nearest,
    "sum": sum,
    "mean": mean,
    "bilinear_sample": bilinear_sample,
}


def apply_primitive(name: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch a primitive by name; ``attrs`` carry static parameters."""
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        raise UsageError(f"unknown primitive {name!r}") from None
    if name in ("concat", "stack"):
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
