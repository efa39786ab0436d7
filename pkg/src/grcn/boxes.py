"""Axis-aligned box arithmetic.

Boxes are ``(x1, y1, x2, y2)`` in continuous image pixels with area
``(x2 - x1) * (y2 - y1)``; a box list is an ``(N, 4)`` float array. Deltas are
``(dx, dy, dw, dh)`` rows in the usual R-CNN parameterisation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, GeometryError, NumericError


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.shape[-1] != 4:
        raise DimensionError(f"boxes need 4 coordinates on the last axis, got shape {arr.shape}")
    return arr.reshape(-1, 4)


def area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when either has zero area."""
    ax1, ay1, ax2, ay2 = map(float, a)
    bx1, by1, bx2, by2 = map(float, b)
    area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
    area_b = max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    a, b = as_boxes(a), as_boxes(b)
    area_a, area_b = area(a), area(b)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=valid & (union > 0))
    return out


@dataclass(frozen=True)
class AnchorGrid:
    feature_h: int
    feature_w: int
    stride: int
    sizes: tuple
    ratios: tuple
    boxes: np.ndarray

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def per_cell(self) -> int:
        return len(self.sizes) * len(self.ratios)


def generate_anchors(feature_h: int, feature_w: int, stride: int, sizes: Sequence[float],
                     ratios: Sequence[float]) -> AnchorGrid:
    """Tile anchors over a feature grid.

    Ordering is cell row-major, then size, then ratio. An anchor of size s
    and ratio r (height / width) has area s² and is centred on its cell.
    """
    sizes = tuple(float(s) for s in sizes)
    ratios = tuple(float(r) for r in ratios)
    if not sizes or not ratios:
        raise ConfigurationError("anchor sizes and ratios must be non-empty")
    if feature_h < 1 or feature_w < 1 or stride < 1 or min(sizes) <= 0 or min(ratios) <= 0:
        raise ConfigurationError("anchor grid dimensions, stride, sizes and ratios must be positive")
    s = np.repeat(np.asarray(sizes), len(ratios))
    r = np.tile(np.asarray(ratios), len(sizes))
    ws = s / np.sqrt(r)
    hs = s * np.sqrt(r)
    base = np.stack([-ws / 2, -hs / 2, ws / 2, hs / 2], axis=1)  # per-cell templates
    cy = np.arange(feature_h) * stride + stride / 2
    cx = np.arange(feature_w) * stride + stride / 2
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx, cyy, cxx, cyy], axis=-1).reshape(-1, 1, 4)
    boxes = (centers + base[None]).reshape(-1, 4)
    return AnchorGrid(feature_h, feature_w, int(stride), sizes, ratios, boxes)


def _centers(b: np.ndarray):
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def encode_box(anchor, target) -> np.ndarray:
    """Deltas taking ``anchor`` to ``target``; works row-wise on (N, 4) arrays."""
    a = np.asarray(anchor, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    acx, acy, aw, ah = _centers(a)
    tcx, tcy, tw, th = _centers(t)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise GeometryError("encode_box: anchor must have positive width and height")
    if np.any(tw <= 0) or np.any(th <= 0):
        raise GeometryError("encode_box: target must have positive width and height")
    return np.stack([(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)], axis=-1)


def decode_box(anchor, delta, max_log_scale: float = np.log(1000.0 / 16)) -> np.ndarray:
    """Inverse of :func:`encode_box`. Log-scale deltas are capped at ``max_log_scale``."""
    a = np.asarray(anchor, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    if not np.all(np.isfinite(d)):
        raise NumericError("decode_box: non-finite delta")
    acx, acy, aw, ah = _centers(a)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise GeometryError("decode_box: anchor must have positive width and height")
    cx = acx + d[..., 0] * aw
    cy = acy + d[..., 1] * ah
    w = aw * np.exp(np.minimum(d[..., 2], max_log_scale))
    h = ah * np.exp(np.minimum(d[..., 3], max_log_scale))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Returns kept indices in descending score order; equal scores are visited
    by ascending index. A box is suppressed when its IoU with a kept box
    exceeds ``iou_threshold``.
    """
    b = as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if b.shape[0] != s.shape[0]:
        raise DimensionError(f"nms: {b.shape[0]} boxes but {s.shape[0]} scores")
    order = np.lexsort((np.arange(s.size), -s))
    areas = area(b)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        if rest.size == 0:
            break
        iw = np.minimum(b[i, 2], b[rest, 2]) - np.maximum(b[i, 0], b[rest, 0])
        ih = np.minimum(b[i, 3], b[rest, 3]) - np.maximum(b[i, 1], b[rest, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        union = areas[i] + areas[rest] - inter
        ov = np.zeros_like(inter)
        if areas[i] > 0:
            np.divide(inter, union, out=ov, where=(areas[rest] > 0) & (union > 0))
        order = rest[ov <= iou_threshold]
    return keep


def clip_to_image(boxes, width: float, height: float) -> np.ndarray:
    """Clamp coordinates into ``[0, width] x [0, height]``."""
    b = as_boxes(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b
