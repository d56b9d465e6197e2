"""Independent reference implementations used to check the real code.

Everything here is written the slow, obvious way (explicit loops, textbook
formulas) and must stay independent of the implementation paths it verifies.
"""

from __future__ import annotations

import numpy as np

from ctxdiff.tensor import GradientTape, Tensor

# --------------------------------------------------------------------------- #
# finite-difference gradient checking
# --------------------------------------------------------------------------- #


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = 1e-6 + np.abs(numeric)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _scalar_eval(fn, arrays) -> float:
    tensors = [Tensor(a) for a in arrays]
    return fn(*tensors).item()


def numeric_grad(fn, arrays, index: int, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn`` w.r.t. ``arrays[index]``."""
    work = [a.copy() for a in arrays]
    grad = np.zeros_like(work[index])
    flat = work[index].reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = _scalar_eval(fn, work)
        flat[j] = orig - h
        fm = _scalar_eval(fn, work)
        flat[j] = orig
        gflat[j] = (fp - fm) / (2.0 * h)
    return grad


def fd_check(fn, arrays, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Compare tape gradients of scalar ``fn`` against central differences.

    ``arrays`` must be float64.  Returns the worst relative error across all
    inputs and asserts it is below ``tol``.
    """
    assert all(a.dtype == np.float64 for a in arrays), "gradient checks run in f64"
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with GradientTape():
        loss = fn(*tensors)
        loss.backward()
    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        numeric = numeric_grad(fn, arrays, i, h=h)
        err = max_rel_error(analytic, numeric)
        worst = max(worst, err)
        assert err < tol, f"input {i}: max relative gradient error {err:.3e} >= {tol}"
    return worst


def weighted_sum(t, weights: np.ndarray):
    """Reduce a tensor to a scalar with fixed weights (exercises every element)."""
    return (t * weights).sum()


# --------------------------------------------------------------------------- #
# value oracles
# --------------------------------------------------------------------------- #


def naive_conv2d(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None,
                 stride: int = 1, padding: int = 0) -> np.ndarray:
    """Sliding-window convolution with explicit loops."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo), dtype=x.dtype)
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
            if bias is not None:
                out[b, o] += bias[o]
    return out


def naive_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention, one query row at a time (2-D inputs)."""
    Lq, d = q.shape
    Lk, dv = v.shape
    out = np.zeros((Lq, dv), dtype=q.dtype)
    for i in range(Lq):
        scores = np.array([np.dot(q[i], k[j]) / np.sqrt(d) for j in range(Lk)])
        scores = scores - scores.max()
        weights = np.exp(scores)
        weights = weights / weights.sum()
        for j in range(Lk):
            out[i] += weights[j] * v[j]
    return out


def naive_group_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                     groups: int, eps: float = 1e-5) -> np.ndarray:
    B, C, H, W = x.shape
    cg = C // groups
    out = np.empty_like(x)
    for b in range(B):
        for g in range(groups):
            sl = x[b, g * cg:(g + 1) * cg]
            mu = sl.mean()
            var = sl.var()
            out[b, g * cg:(g + 1) * cg] = (sl - mu) / np.sqrt(var + eps)
    return out * gamma.reshape(1, C, 1, 1) + beta.reshape(1, C, 1, 1)


# 4x4 ramp image, all-ones 3x3 kernel, stride 1, padding 1 -- worked by hand.
RAMP_CONV_INPUT = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
RAMP_CONV_KERNEL = np.ones((1, 1, 3, 3), dtype=np.float64)
RAMP_CONV_EXPECTED = np.array(
    [[10, 18, 24, 18],
     [27, 45, 54, 39],
     [51, 81, 90, 63],
     [42, 66, 72, 50]], dtype=np.float64).reshape(1, 1, 4, 4)


# -- image-map oracles (loop-based, used by the task generator tests) ----------


def naive_sobel(gray: np.ndarray) -> np.ndarray:
    """Per-pixel 3x3 Sobel gradient magnitude with replicate borders."""
    H, W = gray.shape
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    ky = kx.T
    out = np.zeros((H, W), dtype=np.float64)
    for y in range(H):
        for x in range(W):
            gx = gy = 0.0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy = min(max(y + dy, 0), H - 1)
                    xx = min(max(x + dx, 0), W - 1)
                    gx += kx[dy + 1, dx + 1] * gray[yy, xx]
                    gy += ky[dy + 1, dx + 1] * gray[yy, xx]
            out[y, x] = np.sqrt(gx * gx + gy * gy)
    return out


def naive_box_blur(gray: np.ndarray) -> np.ndarray:
    H, W = gray.shape
    out = np.zeros((H, W), dtype=np.float64)
    for y in range(H):
        for x in range(W):
            acc = 0.0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    acc += gray[min(max(y + dy, 0), H - 1), min(max(x + dx, 0), W - 1)]
            out[y, x] = acc / 9.0
    return out


def naive_shape_mask(kind: str, cx: int, cy: int, s: int, size: int) -> np.ndarray:
    """Loop rasterizer for the three shape kinds."""
    out = np.zeros((size, size), dtype=bool)
    for y in range(size):
        for x in range(size):
            dx, dy = x - cx, y - cy
            if kind == "circle":
                out[y, x] = dx * dx + dy * dy <= s * s
            elif kind == "square":
                out[y, x] = abs(dx) <= s and abs(dy) <= s
            elif kind == "triangle":
                out[y, x] = -s <= dy <= s and 2 * abs(dx) <= dy + s
    return out


def naive_boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (or off-canvas)."""
    H, W = mask.shape
    out = np.zeros_like(mask)
    for y in range(H):
        for x in range(W):
            if not mask[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < H and 0 <= xx < W) or not mask[yy, xx]:
                    out[y, x] = True
                    break
    return out
