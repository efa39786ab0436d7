"""Differentiable layer operations used by the detector graph.

All ops take and return :class:`~grcn.tensor.Tensor` and use NCHW layout.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericError
from .tensor import Tensor, as_tensor, make_result


def _out_dim(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _scatter_add(size: int, flat_index: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.bincount(flat_index.ravel(), weights=values.ravel(), minlength=size)


def conv2d(x: Tensor, weight: Tensor, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``weight`` has shape (out_channels, in_channels, kh, kw). Output spatial
    size is ``floor((H + 2p - kh) / s) + 1``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise DimensionError(f"conv2d channel axis mismatch: input C={c} vs weight I={ci}")
    ho, wo = _out_dim(h, kh, stride, padding), _out_dim(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d kernel ({kh},{kw}) larger than padded input ({h},{w})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d bias shape {bias.shape} != ({o},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def backward(g):
        grads = []
        if x.requires_grad:
            dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # n, ho, wo, c, kh, kw
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            grads.append((x, dx))
        if weight.requires_grad:
            grads.append((weight, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))))
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return grads

    return make_result(out, parents, backward)


def maxpool2d(x: Tensor, kernel=(2, 2), stride: int = 2, padding: int = 0) -> Tensor:
    """Max pooling; the gradient goes to the first maximum in row-major order."""
    x = as_tensor(x)
    if isinstance(kernel, int):
        kernel = (kernel, kernel)
    kh, kw = kernel
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got {x.shape}")
    if stride < 1 or kh < 1 or kw < 1:
        raise DimensionError("maxpool2d kernel and stride must be positive")
    n, c, h, w = x.shape
    ho, wo = _out_dim(h, kh, stride, padding), _out_dim(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"maxpool2d kernel ({kh},{kw}) larger than padded input ({h},{w})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2:]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, kh * kw)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        rows = np.arange(ho)[:, None] * stride + arg // kw
        cols = np.arange(wo)[None, :] * stride + arg % kw
        flat = (np.arange(n * c).reshape(n, c, 1, 1) * hp + rows) * wp + cols
        dxp = _scatter_add(n * c * hp * wp, flat, g).reshape(n, c, hp, wp)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return ((x, dx),)

    return make_result(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` of shape (D, M)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear dimension mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [(x, g @ weight.data.T), (weight, x.data.T @ g)]
        if bias is not None:
            grads.append((bias, g.sum(axis=0)))
        return grads

    return make_result(out, parents, backward)


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{what}: non-finite input")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax_rows needs at least one column")
    _check_finite(x.data, "softmax_rows")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((x, s * (g - (g * s).sum(axis=-1, keepdims=True))),)

    return make_result(s, (x,), backward)


def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """Mean softmax cross-entropy over rows; ``weights`` rescale rows before the mean."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        return Tensor(0.0)
    _check_finite(logits.data, "cross_entropy")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    loss = -(w * logp[np.arange(n), labels]).sum() / n

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return ((logits, g * p * w[:, None] / n),)

    return make_result(np.array(loss), (logits,), backward)


def smooth_l1(x):
    """Elementwise smooth-L1 on plain numbers or arrays."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def smooth_l1_loss(pred: Tensor, target, mask, normalizer: float) -> Tensor:
    """Sum of smooth-L1(pred - target) over ``mask`` entries, divided by ``normalizer``."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    diff = pred.data - target
    loss = float((smooth_l1(diff) * mask).sum() / max(normalizer, 1.0))
    denom = max(normalizer, 1.0)

    def backward(g):
        d = np.where(np.abs(diff) < 1.0, diff, np.sign(diff))
        return ((pred, g * d * mask / denom),)

    return make_result(np.array(loss), (pred,), backward)


# -- region pooling ---------------------------------------------------------

def roi_bin_edges(rois, out_size: int, stride: float):
    """Continuous bin edges in feature coordinates, shape (R, out_size + 1) each for y and x."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4) / float(stride)
    t = np.arange(out_size + 1) / out_size
    ys = rois[:, 1:2] + t * (rois[:, 3:4] - rois[:, 1:2])
    xs = rois[:, 0:1] + t * (rois[:, 2:3] - rois[:, 0:1])
    return ys, xs


def roi_bins(rois, out_size: int, stride: float, height: int, width: int):
    """Integer bin ranges ``[start, end)`` per ROI for rows and columns.

    Starts are floored, ends ceiled, everything clamped to the map, and empty
    bins widened to one cell. Returns (y0, y1, x0, x1), each (R, out_size).
    """
    ys, xs = roi_bin_edges(rois, out_size, stride)

    def rounded(edges, limit):
        start = np.clip(np.floor(edges[:, :-1]), 0, limit - 1).astype(np.int64)
        end = np.clip(np.ceil(edges[:, 1:]), 0, limit).astype(np.int64)
        end = np.maximum(end, start + 1)
        return start, end

    y0, y1 = rounded(ys, height)
    x0, x1 = rounded(xs, width)
    return y0, y1, x0, x1


def _max_table(fmap: np.ndarray):
    """2-D sparse table of block maxima over a (C, H, W) map.

    ``val[ky, kx, y, x]`` is the per-channel max over rows ``[y, y + 2**ky)``
    and columns ``[x, x + 2**kx)``; ``arg`` holds the row-major first flat
    position of it. Channels are the last axis so lookups gather contiguous rows.
    """
    c, h, w = fmap.shape
    ly, lx = h.bit_length(), w.bit_length()
    val = np.full((ly, lx, h, w, c), -np.inf)
    arg = np.zeros((ly, lx, h, w, c), dtype=np.int64)
    val[0, 0] = fmap.transpose(1, 2, 0)
    arg[0, 0] = np.arange(h * w).reshape(h, w, 1)

    def merge(dst_v, dst_i, a, b, ia, ib):
        pick_b = (b > a) | ((b == a) & (ib < ia))
        dst_v[...] = np.where(pick_b, b, a)
        dst_i[...] = np.where(pick_b, ib, ia)

    for kx in range(1, lx):
        half, n = 1 << (kx - 1), w - (1 << kx) + 1
        merge(val[0, kx, :, :n], arg[0, kx, :, :n],
              val[0, kx - 1, :, :n], val[0, kx - 1, :, half:half + n],
              arg[0, kx - 1, :, :n], arg[0, kx - 1, :, half:half + n])
    for ky in range(1, ly):
        half, n = 1 << (ky - 1), h - (1 << ky) + 1
        merge(val[ky, :, :n], arg[ky, :, :n],
              val[ky - 1, :, :n], val[ky - 1, :, half:half + n],
              arg[ky - 1, :, :n], arg[ky - 1, :, half:half + n])
    return val, arg


def _range_max(val, arg, y0, y1, x0, x1):
    """Max and first row-major argmax over ``[y0, y1) x [x0, x1)`` for flat bin arrays."""
    ky = np.floor(np.log2(y1 - y0)).astype(np.int64)
    kx = np.floor(np.log2(x1 - x0)).astype(np.int64)
    ya, yb = y0, y1 - (1 << ky)
    xa, xb = x0, x1 - (1 << kx)
    best_v = best_i = None
    for yy in (ya, yb):
        for xx in (xa, xb):
            v = val[ky, kx, yy, xx]  # bins, C
            i = arg[ky, kx, yy, xx]
            if best_v is None:
                best_v, best_i = v, i
            else:
                take = (v > best_v) | ((v == best_v) & (i < best_i))
                best_v = np.where(take, v, best_v)
                best_i = np.where(take, i, best_i)
    return best_v, best_i


def roi_pool(features: Tensor, rois, out_size: int, stride: float) -> Tensor:
    """Max-pool each ROI (image coordinates) into an ``out_size`` square grid.

    ``features`` is (1, C, H, W); the result is (R, C, out_size, out_size).
    Ties go to the row-major first cell of the bin.
    """
    features = as_tensor(features)
    if features.ndim != 4 or features.shape[0] != 1:
        raise DimensionError(f"roi_pool expects a (1, C, H, W) map, got {features.shape}")
    _, c, h, w = features.shape
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    r = rois.shape[0]
    y0, y1, x0, x1 = roi_bins(rois, out_size, stride, h, w)
    shape = (r, out_size, out_size)
    by0 = np.broadcast_to(y0[:, :, None], shape).ravel()
    by1 = np.broadcast_to(y1[:, :, None], shape).ravel()
    bx0 = np.broadcast_to(x0[:, None, :], shape).ravel()
    bx1 = np.broadcast_to(x1[:, None, :], shape).ravel()
    val, arg = _max_table(features.data[0])
    best_v, best_i = _range_max(val, arg, by0, by1, bx0, bx1)
    out = best_v.reshape(r, out_size, out_size, c).transpose(0, 3, 1, 2).copy()
    argflat = (best_i + np.arange(c) * (h * w)).reshape(r, out_size, out_size, c).transpose(0, 3, 1, 2)

    def backward(g):
        d = _scatter_add(c * h * w, argflat, g).reshape(1, c, h, w)
        return ((features, d),)

    return make_result(out, (features,), backward)


def roi_align(features: Tensor, rois, out_size: int, stride: float, samples: int = 2) -> Tensor:
    """Bilinear ROI pooling: average of ``samples``² points per bin."""
    features = as_tensor(features)
    if features.ndim != 4 or features.shape[0] != 1:
        raise DimensionError(f"roi_align expects a (1, C, H, W) map, got {features.shape}")
    _, c, h, w = features.shape
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4) / float(stride)
    r = rois.shape[0]
    n = out_size * samples
    t = (np.arange(n) + 0.5) / n
    ys = rois[:, 1:2] + t * (rois[:, 3:4] - rois[:, 1:2]) - 0.5
    xs = rois[:, 0:1] + t * (rois[:, 2:3] - rois[:, 0:1]) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)

    def corners(v, limit):
        lo = np.floor(v).astype(np.int64)
        hi = np.minimum(lo + 1, limit - 1)
        frac = v - lo
        return lo, hi, frac

    ylo, yhi, fy = corners(ys, h)
    xlo, xhi, fx = corners(xs, w)
    # (R, n, n) index grids and weights for the four neighbours
    terms = []
    for yi, wy in ((ylo, 1 - fy), (yhi, fy)):
        for xi, wx in ((xlo, 1 - fx), (xhi, fx)):
            idx = yi[:, :, None] * w + xi[:, None, :]
            wt = wy[:, :, None] * wx[:, None, :]
            terms.append((idx, wt))
    flat = features.data.reshape(c, h * w)
    sampled = np.zeros((r, c, n, n))
    for idx, wt in terms:
        sampled += flat[:, idx].transpose(1, 0, 2, 3) * wt[:, None]
    out = sampled.reshape(r, c, out_size, samples, out_size, samples).mean(axis=(3, 5))
    scale = 1.0 / (samples * samples)

    def backward(g):
        gs = np.repeat(np.repeat(g, samples, axis=2), samples, axis=3) * scale  # r, c, n, n
        d = np.zeros((c, h * w))
        for idx, wt in terms:
            vals = gs * wt[:, None]
            full = (np.arange(c)[None, :, None, None] * (h * w) + idx[:, None]).ravel()
            d += _scatter_add(c * h * w, full, vals).reshape(c, h * w)
        return ((features, d.reshape(1, c, h, w)),)

    return make_result(out, (features,), backward)


def he_std(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)
