"""Target assignment, losses, optimizer, and the single-image training step."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .boxes import AnchorGrid, as_boxes, encode_box, iou_matrix
from .data import SyntheticScene, preprocess
from .detector import DetectorPass, ModelGraph, forward_detect
from .errors import ConfigurationError, DimensionError, NumericError
from .tensor import Tensor

COCO_SCHEDULE = ((240_000, 0.001), (320_000, 0.0001))
VOC_SCHEDULE = ((150_000, 0.001), (180_000, 0.0001))

BG, FG, IGNORE = 0, 1, -1


@dataclass
class TrainConfig:
    lr_schedule: tuple = COCO_SCHEDULE
    momentum: float = 0.9
    weight_decay: float = 0.0
    rpn_batch: int = 256
    rpn_fg_fraction: float = 0.5
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    roi_batch: int = 128
    fg_fraction: float = 0.25
    fg_iou: float = 0.5
    bg_iou_range: tuple = (0.1, 0.5)
    bbox_std: tuple = (0.1, 0.1, 0.2, 0.2)
    flip: bool = True
    shorter_side: Optional[int] = 600
    seed: int = 0

    def __post_init__(self):
        bounds = [b for b, _ in self.lr_schedule]
        if not bounds or any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise ConfigurationError("lr_schedule bounds must be non-empty and strictly increasing")
        if self.rpn_batch < 1 or self.roi_batch < 1:
            raise ConfigurationError("rpn_batch and roi_batch must be positive")
        if not 0.0 <= self.fg_fraction <= 1.0 or not 0.0 <= self.rpn_fg_fraction <= 1.0:
            raise ConfigurationError("foreground fractions must lie in [0, 1]")


def stream_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *stream)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def lr_at(iteration: int, schedule: Sequence) -> float:
    """Step schedule: the lr of the first ``(bound, lr)`` with ``iteration < bound``."""
    if iteration < 0:
        raise ConfigurationError("iteration must be >= 0")
    for bound, lr in schedule:
        if iteration < bound:
            return float(lr)
    return float(schedule[-1][1])


# -- target assignment ------------------------------------------------------------

def label_anchors(anchors, gts, cfg: TrainConfig):
    """Per-anchor label (1 fg, 0 bg, -1 ignore) and index of the best gt.

    Foreground: IoU >= ``rpn_fg_iou`` with some gt, or the first highest-IoU
    anchor of a gt. Background: IoU < ``rpn_bg_iou`` with every gt.
    """
    anchors = as_boxes(anchors)
    gts = as_boxes(gts)
    n = anchors.shape[0]
    if n == 0:
        raise DimensionError("no anchors to label")
    if gts.shape[0] == 0:
        return np.zeros(n, dtype=np.int64), np.full(n, -1, dtype=np.int64)
    ious = iou_matrix(anchors, gts)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[best_iou < cfg.rpn_bg_iou] = BG
    per_gt = ious.argmax(axis=0)
    per_gt = per_gt[ious[per_gt, np.arange(gts.shape[0])] > 0]
    labels[per_gt] = FG
    labels[best_iou >= cfg.rpn_fg_iou] = FG
    return labels, best_gt


def _sample(rng: np.random.Generator, idx: np.ndarray, k: int) -> np.ndarray:
    if idx.size <= k:
        return idx
    return np.sort(rng.choice(idx, size=k, replace=False))


@dataclass
class RpnTargets:
    indices: np.ndarray
    labels: np.ndarray
    deltas: np.ndarray  # zeros for background rows


def assign_rpn_targets(grid, gts, cfg: TrainConfig, rng: np.random.Generator) -> RpnTargets:
    """Sample at most ``rpn_batch`` anchors, up to ``rpn_fg_fraction`` foreground."""
    anchors = grid.boxes if isinstance(grid, AnchorGrid) else as_boxes(grid)
    gts = as_boxes(gts)
    labels, best_gt = label_anchors(anchors, gts, cfg)
    fg = _sample(rng, np.nonzero(labels == FG)[0], int(cfg.rpn_batch * cfg.rpn_fg_fraction))
    bg = _sample(rng, np.nonzero(labels == BG)[0], cfg.rpn_batch - fg.size)
    idx = np.concatenate([fg, bg])
    lab = np.concatenate([np.ones(fg.size, dtype=np.int64), np.zeros(bg.size, dtype=np.int64)])
    deltas = np.zeros((idx.size, 4))
    if fg.size:
        deltas[:fg.size] = encode_box(anchors[fg], gts[best_gt[fg]])
    return RpnTargets(idx, lab, deltas)


def label_rois(rois, gts, cfg: TrainConfig):
    """Per-ROI label (1 fg, 0 bg, -1 excluded) and best-gt index."""
    rois = as_boxes(rois)
    gts = as_boxes(gts)
    n = rois.shape[0]
    if gts.shape[0] == 0:
        return np.zeros(n, dtype=np.int64), np.full(n, -1, dtype=np.int64)
    ious = iou_matrix(rois, gts)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    lo, hi = cfg.bg_iou_range
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[(best_iou >= lo) & (best_iou < hi)] = BG
    labels[best_iou >= cfg.fg_iou] = FG
    return labels, best_gt


@dataclass
class RoiTargets:
    rois: np.ndarray
    labels: np.ndarray  # 0 background, c + 1 for gt class c
    deltas: np.ndarray  # normalised by bbox_std; zeros for background
    gt_index: np.ndarray


def assign_roi_targets(proposals, gts, gt_classes, cfg: TrainConfig, rng: np.random.Generator,
                       append_gt: bool = True) -> RoiTargets:
    """Sample at most ``roi_batch`` ROIs with at most ``fg_fraction`` foreground."""
    gts = as_boxes(gts)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    pool = as_boxes(proposals)
    if append_gt and gts.shape[0]:
        pool = np.concatenate([pool, gts])
    labels, best_gt = label_rois(pool, gts, cfg)
    fg = _sample(rng, np.nonzero(labels == FG)[0], int(round(cfg.roi_batch * cfg.fg_fraction)))
    bg = _sample(rng, np.nonzero(labels == BG)[0], cfg.roi_batch - fg.size)
    idx = np.concatenate([fg, bg])
    rois = pool[idx]
    cls = np.zeros(idx.size, dtype=np.int64)
    deltas = np.zeros((idx.size, 4))
    if fg.size:
        cls[:fg.size] = gt_classes[best_gt[fg]] + 1
        deltas[:fg.size] = encode_box(pool[fg], gts[best_gt[fg]]) / np.asarray(cfg.bbox_std)
    gt_index = np.full(idx.size, -1, dtype=np.int64)
    gt_index[:fg.size] = best_gt[fg]
    return RoiTargets(rois, cls, deltas, gt_index)


# -- losses -------------------------------------------------------------------------

def smooth_l1(x):
    """0.5 x² for |x| < 1, |x| - 0.5 otherwise."""
    return F.smooth_l1(x)


@dataclass
class LossBreakdown:
    total: Tensor
    parts: dict = field(default_factory=dict)


def rpn_losses(objectness: Tensor, deltas: Tensor, targets: RpnTargets):
    n = targets.indices.size
    if n == 0:
        return Tensor(0.0), Tensor(0.0)
    logits = objectness[targets.indices]
    cls_loss = F.cross_entropy(logits, targets.labels)
    mask = np.repeat((targets.labels == FG)[:, None], 4, axis=1)
    reg_loss = F.smooth_l1_loss(deltas[targets.indices], targets.deltas, mask, n)
    return cls_loss, reg_loss


def head_losses(cls_logits: Tensor, bbox_pred: Tensor, targets: RoiTargets):
    n = targets.labels.size
    if n == 0:
        return Tensor(0.0), Tensor(0.0)
    cls_loss = F.cross_entropy(cls_logits, targets.labels)
    k1 = cls_logits.shape[1]
    target = np.zeros((n, 4 * k1))
    mask = np.zeros((n, 4 * k1))
    for i in np.nonzero(targets.labels > 0)[0]:
        c = targets.labels[i]
        target[i, 4 * c:4 * c + 4] = targets.deltas[i]
        mask[i, 4 * c:4 * c + 4] = 1.0
    loc_loss = F.smooth_l1_loss(bbox_pred, target, mask, n)
    return cls_loss, loc_loss


def multitask_loss(rpn_outputs: dict, rpn_targets: dict, head_outputs, roi_targets: RoiTargets,
                   terms: Optional[Sequence[str]] = None) -> LossBreakdown:
    """Sum of RPN objectness/regression and head classification/localisation losses.

    ``terms`` restricts the total to a subset of
    ``('rpn_cls', 'rpn_reg', 'cls', 'loc')``.
    """
    parts = {"rpn_cls": Tensor(0.0), "rpn_reg": Tensor(0.0)}
    for prefix, (_, obj, dlt) in rpn_outputs.items():
        c, r = rpn_losses(obj, dlt, rpn_targets[prefix])
        parts["rpn_cls"] = parts["rpn_cls"] + c
        parts["rpn_reg"] = parts["rpn_reg"] + r
    parts["cls"], parts["loc"] = head_losses(head_outputs[0], head_outputs[1], roi_targets)
    use = terms or ("rpn_cls", "rpn_reg", "cls", "loc")
    total = Tensor(0.0)
    for key in use:
        total = total + parts[key]
    return LossBreakdown(total, {k: float(v.data) for k, v in parts.items()})


# -- optimizer ----------------------------------------------------------------------

def init_velocity(params: dict) -> dict:
    return {name: np.zeros_like(t.data) for name, t in params.items()}


def sgd_momentum_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float,
                      weight_decay: float = 0.0) -> None:
    """In place: ``v <- momentum * v + grad (+ wd * w)``; ``w <- w - lr * v``."""
    for name in sorted(params):
        w = params[name]
        g = grads[name]
        data = w.data if isinstance(w, Tensor) else w
        if g.shape != data.shape or velocity[name].shape != data.shape:
            raise DimensionError(f"{name}: parameter {data.shape}, grad {g.shape}, "
                                 f"velocity {velocity[name].shape}")
        if weight_decay:
            g = g + weight_decay * data
        v = velocity[name]
        v *= momentum
        v += g
        data -= lr * v


# -- one training step -------------------------------------------------------------------

@dataclass
class StepResult:
    loss: float
    parts: dict
    lr: float
    scene: str


def compute_loss(model: ModelGraph, scene: SyntheticScene, cfg: TrainConfig, rng: np.random.Generator,
                 flip: bool = False, terms=None):
    """Forward one scene in training mode; returns (LossBreakdown, DetectorPass)."""
    image, gts, _ = preprocess(scene.image, scene.boxes, cfg.shorter_side, flip)
    fp: DetectorPass = forward_detect(model, image, "train")
    rpn_targets = {prefix: assign_rpn_targets(grid, gts, cfg, rng)
                   for prefix, (grid, _, _) in fp.rpn.items()}
    roi_targets = assign_roi_targets(fp.proposals, gts, scene.classes, cfg, rng)
    head = fp.run_head(roi_targets.rois) if roi_targets.rois.shape[0] else None
    if head is None:
        k1 = model.num_classes + 1
        head = (Tensor(np.zeros((0, k1))), Tensor(np.zeros((0, 4 * k1))))
    losses = multitask_loss(fp.rpn, rpn_targets, head, roi_targets, terms)
    return losses, fp


def train_step(model: ModelGraph, scene: SyntheticScene, velocity: dict, cfg: TrainConfig,
               iteration: int) -> StepResult:
    """Forward, backward and SGD update for one image at ``iteration``."""
    rng = stream_rng(cfg.seed, 1, iteration)
    flip = bool(cfg.flip and rng.random() < 0.5)
    model.zero_grad()
    losses, _ = compute_loss(model, scene, cfg, rng, flip)
    loss = float(losses.total.data)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss at iteration {iteration} on scene {scene.name}")
    losses.total.backward()
    lr = lr_at(iteration, cfg.lr_schedule)
    grads = {n: t.grad for n, t in model.parameters.items()}
    sgd_momentum_step(model.parameters, grads, velocity, lr, cfg.momentum, cfg.weight_decay)
    return StepResult(loss, losses.parts, lr, scene.name)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return stream_rng(seed, 2, epoch).permutation(n)


def scene_for_iteration(seed: int, iteration: int, n: int) -> int:
    epoch, pos = divmod(iteration, n)
    return int(epoch_order(seed, epoch, n)[pos])


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.zeros(0)
    c = np.concatenate([[0.0], np.cumsum(v)])
    return (c[window:] - c[:-window]) / window
