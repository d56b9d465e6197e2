"""Differentiable operations over :class:`ctxdiff.tensor.Tensor`.

Every op follows the same pattern: validate shapes/dtypes up front with
errors that name the op and both shapes, compute the forward result in plain
numpy, and -- only if a tape is active and some input participates -- record a
closure that routes the output gradient back to the inputs.

Convolution runs as im2col + GEMM.  Patches are gathered in channels-last
layout (channels contiguous in memory makes the gather ~3x faster on this
kind of workload) while the public contract stays B x C x H x W.  The naive
sliding-window definition lives in the test oracles, not here.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, ShapeError, UsageError
from .tensor import Tensor, _active_tape, accumulate_grad

# --------------------------------------------------------------------------- #
# plumbing
# --------------------------------------------------------------------------- #

def _quiet():
    # overflow in the raw compute is caught by the finite check in _wrap;
    # silence the interim numpy warning rather than let it leak to callers
    return np.errstate(over="ignore", invalid="ignore", divide="ignore")


def _wrap(data: np.ndarray, op: str) -> Tensor:
    """Build an output tensor without re-validating (op already checked)."""
    mn = data.min() if data.size else 0.0
    mx = data.max() if data.size else 0.0
    if not (np.isfinite(mn) and np.isfinite(mx)):
        raise NumericError(f"{op}: result contains non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    return out


def _maybe_record(out: Tensor, parents, backward_fn) -> None:
    tape = _active_tape()
    if tape is None:
        return
    if any(p is not None and p.requires_grad for p in parents):
        tape._record(out, backward_fn)


def _coerce_pair(a, b, op: str):
    """Return (tensor_a|None, tensor_b|None, array_a, array_b).

    Non-Tensor operands become constant arrays in the other side's dtype and
    receive no gradient.
    """
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    if ta is None and tb is None:
        raise UsageError(f"{op}: at least one operand must be a Tensor")
    if ta is not None and tb is not None:
        if ta.dtype != tb.dtype:
            raise UsageError(f"{op}: dtype mismatch {ta.dtype} vs {tb.dtype}")
        return ta, tb, ta.data, tb.data
    if ta is not None:
        return ta, None, ta.data, np.asarray(b, dtype=ta.dtype)
    return None, tb, np.asarray(a, dtype=tb.dtype), tb.data


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _normalize_axis(axis, ndim: int, op: str):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    axis = tuple(a % ndim if -ndim <= a < ndim else _axis_err(a, ndim, op) for a in axis)
    if len(set(axis)) != len(axis):
        raise UsageError(f"{op}: repeated axis in {axis}")
    return axis


def _axis_err(a, ndim, op):
    raise UsageError(f"{op}: axis {a} out of range for ndim {ndim}")


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


# --------------------------------------------------------------------------- #
# elementwise arithmetic (trailing-dim broadcasting)
# --------------------------------------------------------------------------- #


def add(a, b) -> Tensor:
    ta, tb, ad, bd = _coerce_pair(a, b, "add")
    try:
        with _quiet():
            data = ad + bd
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {ad.shape} and {bd.shape}") from exc
    out = _wrap(data, "add")

    def bwd(g):
        if ta is not None:
            accumulate_grad(ta, _unbroadcast(g, ad.shape))
        if tb is not None:
            accumulate_grad(tb, _unbroadcast(g, bd.shape))

    _maybe_record(out, (ta, tb), bwd)
    return out


def sub(a, b) -> Tensor:
    ta, tb, ad, bd = _coerce_pair(a, b, "sub")
    try:
        with _quiet():
            data = ad - bd
    except ValueError as exc:
        raise ShapeError(f"sub: incompatible shapes {ad.shape} and {bd.shape}") from exc
    out = _wrap(data, "sub")

    def bwd(g):
        if ta is not None:
            accumulate_grad(ta, _unbroadcast(g, ad.shape))
        if tb is not None:
            accumulate_grad(tb, _unbroadcast(-g, bd.shape))

    _maybe_record(out, (ta, tb), bwd)
    return out


def mul(a, b) -> Tensor:
    ta, tb, ad, bd = _coerce_pair(a, b, "mul")
    try:
        with _quiet():
            data = ad * bd
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {ad.shape} and {bd.shape}") from exc
    out = _wrap(data, "mul")

    def bwd(g):
        if ta is not None:
            accumulate_grad(ta, _unbroadcast(g * bd, ad.shape))
        if tb is not None:
            accumulate_grad(tb, _unbroadcast(g * ad, bd.shape))

    _maybe_record(out, (ta, tb), bwd)
    return out


# --------------------------------------------------------------------------- #
# matmul / linear
# --------------------------------------------------------------------------- #


def matmul(a, b) -> Tensor:
    ta, tb, ad, bd = _coerce_pair(a, b, "matmul")
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {ad.shape} @ {bd.shape}")
    try:
        with _quiet():
            data = ad @ bd
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible batch shapes {ad.shape} @ {bd.shape}") from exc
    out = _wrap(data, "matmul")

    def bwd(g):
        if ta is not None:
            ga = g @ bd.swapaxes(-1, -2)
            accumulate_grad(ta, _unbroadcast(ga, ad.shape))
        if tb is not None:
            gb = ad.swapaxes(-1, -2) @ g
            accumulate_grad(tb, _unbroadcast(gb, bd.shape))

    _maybe_record(out, (ta, tb), bwd)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; single GEMM regardless of rank."""
    if not isinstance(x, Tensor) or not isinstance(w, Tensor):
        raise UsageError("linear: x and w must be Tensors")
    if w.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D (in, out), got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape} does not match weight {w.shape}")
    if x.dtype != w.dtype or (b is not None and b.dtype != x.dtype):
        raise UsageError("linear: dtype mismatch between input, weight, and bias")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")

    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    with _quiet():
        data = x2 @ w.data
    if b is not None:
        data += b.data
    out = _wrap(data.reshape(*lead, w.shape[1]), "linear")

    def bwd(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            accumulate_grad(x, (g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            accumulate_grad(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            accumulate_grad(b, g2.sum(axis=0))

    _maybe_record(out, (x, w, b), bwd)
    return out


# --------------------------------------------------------------------------- #
# activations / normalization
# --------------------------------------------------------------------------- #


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))
    out = _wrap(x.data * s, "silu")

    def bwd(g):
        accumulate_grad(x, g * (s + x.data * s * (1.0 - s)))

    _maybe_record(out, (x,), bwd)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _normalize_axis(axis, x.ndim, "softmax")[0]
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    with _quiet():
        e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)
    out = _wrap(y, "softmax")

    def bwd(g):
        inner = (g * y).sum(axis=ax, keepdims=True)
        accumulate_grad(x, y * (g - inner))

    _maybe_record(out, (x,), bwd)
    return out


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize (B, C, H, W) over channel groups, then scale/shift per channel."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm: expected (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    if groups < 1 or C % groups != 0:
        raise ConfigError(f"group_norm: {C} channels not divisible into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: scale/shift must be ({C},), got {gamma.shape} and {beta.shape}")

    m = (C // groups) * H * W
    xg = x.data.reshape(B, groups, m)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xn = (xg - mean) * invstd
    data = xn.reshape(B, C, H, W) * gamma.data.reshape(1, C, 1, 1) \
        + beta.data.reshape(1, C, 1, 1)
    out = _wrap(data, "group_norm")

    def bwd(g):
        # rebuild the normalized activations from the saved per-group stats;
        # the closure then pins only (B, groups) scalars, not a full-size map
        xn = (x.data.reshape(B, groups, m) - mean) * invstd
        if gamma.requires_grad:
            accumulate_grad(gamma, (g * xn.reshape(B, C, H, W)).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxn = (g * gamma.data.reshape(1, C, 1, 1)).reshape(B, groups, m)
            dx = invstd * (dxn - dxn.mean(axis=2, keepdims=True)
                           - xn * (dxn * xn).mean(axis=2, keepdims=True))
            accumulate_grad(x, dx.reshape(B, C, H, W))

    _maybe_record(out, (x, gamma, beta), bwd)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, learned scale/shift of matching width."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: scale/shift must be ({d},), got {gamma.shape} and {beta.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    out = _wrap((x.data - mean) * invstd * gamma.data + beta.data, "layer_norm")

    def bwd(g):
        xn = (x.data - mean) * invstd  # rebuilt from saved row stats
        if gamma.requires_grad:
            accumulate_grad(gamma, (g * xn).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            accumulate_grad(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxn = g * gamma.data
            dx = invstd * (dxn - dxn.mean(axis=-1, keepdims=True)
                           - xn * (dxn * xn).mean(axis=-1, keepdims=True))
            accumulate_grad(x, dx)

    _maybe_record(out, (x, gamma, beta), bwd)
    return out


# --------------------------------------------------------------------------- #
# convolution
# --------------------------------------------------------------------------- #


def _conv_cols(xd: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Gather sliding windows of an NCHW array into a (B*Ho*Wo, kh*kw*C) GEMM
    operand.  Cheap enough to call twice: the backward pass recomputes it
    rather than pinning a buffer many times the input's size."""
    B, C = xd.shape[:2]
    xh = np.ascontiguousarray(xd.transpose(0, 2, 3, 1))
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    v = sliding_window_view(xh, (kh, kw), axis=(1, 2))
    if stride > 1:
        v = v[:, ::stride, ::stride]
    Ho, Wo = v.shape[1], v.shape[2]
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * C)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW in, OIHW kernel, NCHW out.

    Args:
        x: input of shape (B, C, H, W).
        w: kernel of shape (O, C, kh, kw).
        bias: optional (O,) bias added per output channel.
        stride: positive integer step; output extent is floor-divided, so a
            trailing partial window is dropped.
        padding: symmetric zero padding on both spatial axes.
    """
    if not isinstance(x, Tensor) or not isinstance(w, Tensor):
        raise UsageError("conv2d: x and w must be Tensors")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.dtype != w.dtype or (bias is not None and bias.dtype != x.dtype):
        raise UsageError("conv2d: dtype mismatch between input, kernel, and bias")
    if not isinstance(stride, int) or stride < 1:
        raise UsageError(f"conv2d: stride must be a positive int, got {stride!r}")
    if not isinstance(padding, int) or padding < 0:
        raise UsageError(f"conv2d: padding must be a non-negative int, got {padding!r}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: kernel channels {w.shape} do not match input {x.shape}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ConfigError(
            f"conv2d: no valid output positions for input {x.shape}, kernel {w.shape}, "
            f"stride {stride}, padding {padding}")
    # floor output size, as in the standard stride-2 halving (31 windows -> 16)
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    wmat = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * C, O)
    flat = _conv_cols(x.data, kh, kw, stride, padding) @ wmat
    if bias is not None:
        flat += bias.data
    out = _wrap(np.ascontiguousarray(flat.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)), "conv2d")

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        if w.requires_grad:
            cols = _conv_cols(x.data, kh, kw, stride, padding)
            dw = (cols.T @ g2).reshape(kh, kw, C, O).transpose(3, 2, 0, 1)
            accumulate_grad(w, np.ascontiguousarray(dw))
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, C)
            dxh = np.zeros((B, Hp, Wp, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxh[:, i:i + stride * (Ho - 1) + 1:stride,
                        j:j + stride * (Wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
            if padding:
                dxh = dxh[:, padding:padding + H, padding:padding + W, :]
            accumulate_grad(x, np.ascontiguousarray(dxh.transpose(0, 3, 1, 2)))

    _maybe_record(out, (x, w, bias), bwd)
    return out


# --------------------------------------------------------------------------- #
# attention
# --------------------------------------------------------------------------- #


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes; leading axes batch.

    Fused primitive: the (Lq, Lk) score matrix lives only transiently and the
    closure keeps just the softmax output, instead of the three full-size
    intermediates a matmul/softmax/matmul chain would pin on the tape.
    """
    for name, t in (("q", q), ("k", k), ("v", v)):
        if not isinstance(t, Tensor):
            raise UsageError(f"attention: {name} must be a Tensor")
        if t.ndim < 2:
            raise ShapeError(f"attention: {name} must be >=2-D, got {t.shape}")
    d = q.shape[-1]
    if k.shape[-1] != d:
        raise ShapeError(f"attention: query dim {q.shape} != key dim {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: key length {k.shape} != value length {v.shape}")
    if d == 0 or q.shape[-2] == 0 or k.shape[-2] == 0:
        raise UsageError(f"attention: empty sequence or zero width (q {q.shape}, k {k.shape})")
    if not (q.shape[:-2] == k.shape[:-2] == v.shape[:-2]):
        raise ShapeError(
            f"attention: leading (batch) dims differ: q {q.shape}, k {k.shape}, v {v.shape}")
    if not (q.dtype == k.dtype == v.dtype):
        raise UsageError("attention: dtype mismatch between q, k, and v")

    scale = 1.0 / float(np.sqrt(d))
    with _quiet():
        y = q.data @ np.swapaxes(k.data, -1, -2)
        y *= scale
        y -= y.max(axis=-1, keepdims=True)
        np.exp(y, out=y)
        y /= y.sum(axis=-1, keepdims=True)
        out = _wrap(y @ v.data, "attention")

    def bwd(g):
        with _quiet():
            if v.requires_grad:
                accumulate_grad(v, np.swapaxes(y, -1, -2) @ g)
            if q.requires_grad or k.requires_grad:
                ds = g @ np.swapaxes(v.data, -1, -2)
                ds -= (ds * y).sum(axis=-1, keepdims=True)
                ds *= y
                ds *= scale
                if q.requires_grad:
                    accumulate_grad(q, ds @ k.data)
                if k.requires_grad:
                    accumulate_grad(k, np.swapaxes(ds, -1, -2) @ q.data)

    _maybe_record(out, (q, k, v), bwd)
    return out


# --------------------------------------------------------------------------- #
# shape / structure
# --------------------------------------------------------------------------- #


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    out = _wrap(data, "reshape")

    def bwd(g):
        accumulate_grad(x, g.reshape(x.shape))

    _maybe_record(out, (x,), bwd)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise UsageError(f"transpose: axes {axes} is not a permutation for ndim {x.ndim}")
    data = x.data.transpose(axes)
    out = _wrap(data, "transpose")
    inv = tuple(np.argsort([a % x.ndim for a in axes]))

    def bwd(g):
        accumulate_grad(x, g.transpose(inv))

    _maybe_record(out, (x,), bwd)
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat: empty tensor list")
    if not all(isinstance(t, Tensor) for t in tensors):
        raise UsageError("concat: all inputs must be Tensors")
    ndim = tensors[0].ndim
    dtype = tensors[0].dtype
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ShapeError(f"concat: rank mismatch {tensors[0].shape} vs {t.shape}")
        if t.dtype != dtype:
            raise UsageError("concat: dtype mismatch between inputs")
    ax = _normalize_axis(axis, ndim, "concat")[0]
    try:
        data = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    out = _wrap(data, "concat")
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * ndim
                idx[ax] = slice(int(lo), int(hi))
                accumulate_grad(t, g[tuple(idx)])

    _maybe_record(out, tuple(tensors), bwd)
    return out


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Repeat each spatial position 2x2; input (B, C, H, W) -> (B, C, 2H, 2W)."""
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2x: expected (B, C, H, W), got {x.shape}")
    B, C, H, W = x.shape
    data = np.broadcast_to(x.data[:, :, :, None, :, None],
                           (B, C, H, 2, W, 2)).reshape(B, C, 2 * H, 2 * W)
    out = _wrap(np.ascontiguousarray(data), "upsample_nearest2x")

    def bwd(g):
        accumulate_grad(x, g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

    _maybe_record(out, (x,), bwd)
    return out


# --------------------------------------------------------------------------- #
# reductions
# --------------------------------------------------------------------------- #


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _normalize_axis(axis, x.ndim, "sum")
    data = x.data.sum(axis=ax, keepdims=keepdims)
    out = _wrap(np.asarray(data), "sum")

    def bwd(g):
        accumulate_grad(x, np.ascontiguousarray(_expand_reduced(g, x.shape, ax, keepdims)))

    _maybe_record(out, (x,), bwd)
    return out


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _normalize_axis(axis, x.ndim, "mean")
    data = x.data.mean(axis=ax, keepdims=keepdims)
    count = x.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    out = _wrap(np.asarray(data), "mean")

    def bwd(g):
        accumulate_grad(x, np.ascontiguousarray(_expand_reduced(g / count, x.shape, ax, keepdims)))

    _maybe_record(out, (x,), bwd)
    return out


def mse(a: Tensor, b) -> Tensor:
    """Mean squared error over all elements; scalar output."""
    d = sub(a, b)
    return tensor_mean(mul(d, d))
