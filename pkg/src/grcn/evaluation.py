"""COCO-style average precision with size buckets.

Undefined values (a class or size bucket without ground truth) are ``None``
in Python, ``null`` in JSON and ``undefined`` in the text report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .boxes import iou
from .data import LARGE_AREA, SMALL_AREA

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
BUCKETS = {
    "all": (0.0, float("inf")),
    "small": (0.0, float(SMALL_AREA)),
    "medium": (float(SMALL_AREA), float(LARGE_AREA)),
    "large": (float(LARGE_AREA), float("inf")),
}
UNDEFINED = "undefined"


@dataclass(frozen=True)
class DetectionRecord:
    image_id: int
    box: tuple
    class_id: int
    score: float


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    box: tuple
    class_id: int


def _as_gt(g) -> GroundTruth:
    if isinstance(g, GroundTruth):
        return g
    image_id, box, class_id = g
    return GroundTruth(image_id, tuple(map(float, box)), int(class_id))


def _box_area(box) -> float:
    return max(box[2] - box[0], 0.0) * max(box[3] - box[1], 0.0)


@dataclass
class MatchResult:
    order: np.ndarray  # detection indices by descending score
    tp: np.ndarray  # per input detection
    matched_gt: np.ndarray  # index into gts, -1 when unmatched


def match_detections(dets: Sequence[DetectionRecord], gts: Sequence, iou_thr: float) -> MatchResult:
    """Greedy matching by descending score (ties keep input order).

    A detection takes the unmatched same-class, same-image gt with the highest
    IoU >= ``iou_thr``; everything else is a false positive.
    """
    gts = [_as_gt(g) for g in gts]
    by_key: dict = {}
    for j, g in enumerate(gts):
        by_key.setdefault((g.image_id, g.class_id), []).append(j)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.lexsort((np.arange(len(dets)), -scores)) if len(dets) else np.zeros(0, dtype=np.int64)
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    matched = np.full(len(dets), -1, dtype=np.int64)
    for i in order:
        d = dets[i]
        best, best_j = iou_thr, -1
        for j in by_key.get((d.image_id, d.class_id), ()):
            if taken[j]:
                continue
            v = iou(d.box, gts[j].box)
            if v >= best and (best_j < 0 or v > best):
                best, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
            tp[i] = True
            matched[i] = best_j
    return MatchResult(order, tp, matched)


def average_precision(tp_flags: Sequence[bool], n_gt: int, interpolation: str = "coco101") -> Optional[float]:
    """Area under the interpolated precision/recall curve.

    ``tp_flags`` are in descending-score order. ``coco101`` samples the
    monotone precision envelope at recalls 0, 0.01, ..., 1; ``voc11`` at
    0, 0.1, ..., 1. Returns ``None`` when ``n_gt == 0``.
    """
    if n_gt <= 0:
        return None
    tp = np.asarray(tp_flags, dtype=bool)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    n_points = {"coco101": 101, "voc11": 11}.get(interpolation)
    if n_points is None:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    # k / (n - 1) rather than linspace so recalls like 3/10 hit their point exactly
    points = np.arange(n_points) / (n_points - 1)
    idx = np.searchsorted(recall, points, side="left")
    q = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(q.mean())


def _mean_defined(values: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class EvalReport:
    ap: Optional[float]
    ap50: Optional[float]
    ap70: Optional[float]
    ap75: Optional[float]
    ap_small: Optional[float]
    ap_medium: Optional[float]
    ap_large: Optional[float]
    per_class: dict = field(default_factory=dict)
    unknown_class_dets: int = 0

    def to_dict(self) -> dict:
        out = {"ap": self.ap, "ap50": self.ap50, "ap70": self.ap70, "ap75": self.ap75,
               "ap_s": self.ap_small, "ap_m": self.ap_medium, "ap_l": self.ap_large}
        for cid in sorted(self.per_class):
            out[f"per_class.{cid}"] = self.per_class[cid]
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={UNDEFINED if v is None else repr(float(v))}\n"
                       for k, v in self.to_dict().items())

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def _class_ap_table(dets, gts, class_id, interpolation):
    """AP per (threshold, bucket) for one class."""
    d = [x for x in dets if x.class_id == class_id]
    g = [x for x in gts if x.class_id == class_id]
    gt_area = np.array([_box_area(x.box) for x in g])
    det_area = np.array([_box_area(x.box) for x in d])
    table = {}
    for thr in IOU_THRESHOLDS:
        m = match_detections(d, g, thr)
        for bucket, (lo, hi) in BUCKETS.items():
            in_gt = (gt_area >= lo) & (gt_area < hi)
            flags = []
            for i in m.order:
                j = m.matched_gt[i]
                if j >= 0:
                    if in_gt[j]:
                        flags.append(True)
                elif lo <= det_area[i] < hi:
                    flags.append(False)
            table[(thr, bucket)] = average_precision(flags, int(in_gt.sum()), interpolation)
    return table


def coco_metrics(dets: Sequence[DetectionRecord], gts: Sequence, num_classes: Optional[int] = None,
                 interpolation: str = "coco101") -> EvalReport:
    """Evaluate detections against ground truth over IoU 0.50:0.05:0.95.

    Class APs are averaged over thresholds, then over classes that have
    ground truth. Size buckets keep ground truth by area ([0, 32²),
    [32², 96²), [96², inf)); detections matched to ground truth outside the
    bucket are dropped, and unmatched detections count only if their own
    area falls inside the bucket. Detections whose class id is outside the
    known classes are counted as false positives in ``unknown_class_dets``.
    """
    gts = [_as_gt(g) for g in gts]
    if num_classes is None:
        classes = sorted({g.class_id for g in gts})
    else:
        classes = list(range(num_classes))
    known = set(classes)
    unknown = sum(1 for d in dets if d.class_id not in known)
    tables = {c: _class_ap_table(dets, gts, c, interpolation) for c in classes}

    def over_classes(thrs, bucket):
        per = [_mean_defined(tables[c][(t, bucket)] for t in thrs) for c in classes]
        return _mean_defined(per)

    per_class = {c: _mean_defined(tables[c][(t, "all")] for t in IOU_THRESHOLDS) for c in classes}
    return EvalReport(
        ap=over_classes(IOU_THRESHOLDS, "all"),
        ap50=over_classes((0.5,), "all"),
        ap70=over_classes((0.7,), "all"),
        ap75=over_classes((0.75,), "all"),
        ap_small=over_classes(IOU_THRESHOLDS, "small"),
        ap_medium=over_classes(IOU_THRESHOLDS, "medium"),
        ap_large=over_classes(IOU_THRESHOLDS, "large"),
        per_class=per_class,
        unknown_class_dets=unknown,
    )
