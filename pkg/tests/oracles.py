"""Slow, independent reference implementations used as test oracles."""

import math

import numpy as np


def iou_scalar(a, b):
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    aa = max(ax2 - ax1, 0) * max(ay2 - ay1, 0)
    ab = max(bx2 - bx1, 0) * max(by2 - by1, 0)
    if aa <= 0 or ab <= 0:
        return 0.0
    inter = max(min(ax2, bx2) - max(ax1, bx1), 0) * max(min(ay2, by2) - max(ay1, by1), 0)
    return inter / (aa + ab - inter)


def raster_iou(a, b, extent=None):
    """IoU of integer boxes by counting unit pixels on a grid."""
    extent = extent or int(max(max(a), max(b))) + 1
    ys, xs = np.mgrid[0:extent, 0:extent]
    ma = (xs >= a[0]) & (xs < a[2]) & (ys >= a[1]) & (ys < a[3])
    mb = (xs >= b[0]) & (xs < b[2]) & (ys >= b[1]) & (ys < b[3])
    union = int((ma | mb).sum())
    if not ma.any() or not mb.any():
        return 0.0
    return int((ma & mb).sum()) / union


def nms_reference(boxes, scores, thr):
    """O(n^2) greedy suppression: visit by (-score, index), keep if no kept box overlaps > thr."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou_scalar(boxes[i], boxes[j]) <= thr for j in keep):
            keep.append(i)
    return keep


def encode_reference(a, t):
    aw, ah = a[2] - a[0], a[3] - a[1]
    tw, th = t[2] - t[0], t[3] - t[1]
    acx, acy = a[0] + aw / 2, a[1] + ah / 2
    tcx, tcy = t[0] + tw / 2, t[1] + th / 2
    return [(tcx - acx) / aw, (tcy - acy) / ah, math.log(tw / aw), math.log(th / ah)]


def best_match(box, gts):
    """(best iou, first gt index achieving it) by a linear scan."""
    best, arg = -1.0, -1
    for j, g in enumerate(gts):
        v = iou_scalar(box, g)
        if v > best:
            best, arg = v, j
    return best, arg


def anchor_labels_reference(anchors, gts, fg_thr, bg_thr):
    """Exhaustive RPN anchor labelling: 1 fg, 0 bg, -1 ignore."""
    labels = []
    for a in anchors:
        best, _ = best_match(a, gts)
        labels.append(1 if best >= fg_thr else 0 if best < bg_thr else -1)
    for g in gts:
        best, arg = -1.0, -1
        for i, a in enumerate(anchors):
            v = iou_scalar(a, g)
            if v > best:
                best, arg = v, i
        if best > 0:
            labels[arg] = 1
    return labels


def roi_labels_reference(rois, gts, fg_thr, bg_lo, bg_hi):
    labels = []
    for r in rois:
        best, _ = best_match(r, gts)
        labels.append(1 if best >= fg_thr else 0 if bg_lo <= best < bg_hi else -1)
    return labels


def ap_reference(tp_flags, n_gt, points=101):
    """Precision envelope sampled at evenly spaced recalls, by explicit loops."""
    precisions, recalls = [], []
    tp = fp = 0
    for f in tp_flags:
        tp += bool(f)
        fp += not f
        precisions.append(tp / (tp + fp))
        recalls.append(tp / n_gt)
    total = 0.0
    for k in range(points):
        r = k / (points - 1)
        cands = [p for p, rc in zip(precisions, recalls) if rc >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / points


def verify_target_assignment(seed):
    """Assign RPN and ROI targets on a random scene and re-derive every sampled row exhaustively."""
    from grcn.boxes import generate_anchors
    from grcn.data import generate_scene
    from grcn.training import TrainConfig, assign_roi_targets, assign_rpn_targets, stream_rng

    cfg = TrainConfig()
    scene = generate_scene(seed, 0, 3, (128, 128))
    gts = scene.boxes.tolist()
    rng = np.random.default_rng(seed)
    grid = generate_anchors(8, 8, 16, (16, 32, 64), (0.5, 1.0, 2.0))
    anchors = grid.boxes.tolist()

    rpn = assign_rpn_targets(grid, scene.boxes, cfg, stream_rng(seed, 9))
    labels = anchor_labels_reference(anchors, gts, cfg.rpn_fg_iou, cfg.rpn_bg_iou)
    n_fg_avail = labels.count(1)
    n_bg_avail = labels.count(0)
    n_fg = int(rpn.labels.sum())
    assert n_fg == min(n_fg_avail, int(cfg.rpn_batch * cfg.rpn_fg_fraction))
    assert rpn.labels.size == n_fg + min(n_bg_avail, cfg.rpn_batch - n_fg)
    assert len(set(rpn.indices.tolist())) == rpn.indices.size
    for i, lab, d in zip(rpn.indices, rpn.labels, rpn.deltas):
        assert labels[i] == lab
        if lab == 1:
            _, g = best_match(anchors[i], gts)
            assert np.allclose(d, encode_reference(anchors[i], gts[g]), atol=1e-12)
        else:
            assert not d.any()

    xy = rng.uniform(-10, 120, (300, 2))
    props = np.hstack([xy, xy + rng.uniform(4, 60, (300, 2))])
    jitter = np.repeat(scene.boxes, 20, axis=0) + rng.normal(0, 3, (20 * len(gts), 4))
    props = np.vstack([props, jitter])
    roi = assign_roi_targets(props, scene.boxes, scene.classes, cfg, stream_rng(seed, 10))
    pool = props.tolist() + gts
    rlabels = roi_labels_reference(pool, gts, cfg.fg_iou, *cfg.bg_iou_range)
    fg_cap = int(round(cfg.roi_batch * cfg.fg_fraction))
    n_fg = int((roi.labels > 0).sum())
    assert n_fg == min(rlabels.count(1), fg_cap)
    assert roi.labels.size == n_fg + min(rlabels.count(0), cfg.roi_batch - n_fg)
    for box, lab, d in zip(roi.rois.tolist(), roi.labels, roi.deltas):
        best, g = best_match(box, gts)
        if lab > 0:
            assert best >= cfg.fg_iou and lab == scene.classes[g] + 1
            want = np.array(encode_reference(box, gts[g])) / np.array(cfg.bbox_std)
            assert np.allclose(d, want, atol=1e-12)
        else:
            assert cfg.bg_iou_range[0] <= best < cfg.bg_iou_range[1]
            assert not d.any()
    return True
