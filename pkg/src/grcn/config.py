"""Flat ``section.key = value`` experiment configuration with strict parsing."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .detector import (BACKBONES, COCO_ANCHOR_SIZES, ANCHOR_RATIOS, VARIANTS, ModelGraph,
                       ProposalSettings, branch_spec_for, build_model)
from .errors import ConfigurationError
from .training import COCO_SCHEDULE, TrainConfig


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_floats(text: str) -> tuple:
    items = [s for s in (p.strip() for p in text.split(",")) if s]
    if not items:
        raise ValueError("expected a comma-separated list of numbers")
    return tuple(float(s) for s in items)


def _parse_schedule(text: str) -> tuple:
    """``bound:lr, bound:lr``: lr applies while iteration < bound."""
    out = []
    for part in (p.strip() for p in text.split(",")):
        if not part:
            continue
        bound, _, lr = part.partition(":")
        if not lr:
            raise ValueError(f"schedule entry {part!r} must be bound:lr")
        out.append((int(bound), float(lr)))
    if not out:
        raise ValueError("empty schedule")
    return tuple(out)


def _fmt_floats(v) -> str:
    return ",".join(repr(float(x)) for x in v)


def _fmt_schedule(v) -> str:
    return ",".join(f"{int(b)}:{float(lr)!r}" for b, lr in v)


def _fmt_bool(v) -> str:
    return "true" if v else "false"


@dataclass(frozen=True)
class _Key:
    default: Any
    parse: Callable[[str], Any]
    fmt: Callable[[Any], str] = str
    choices: tuple = ()


SCHEMA: dict[str, _Key] = {
    "model.variant": _Key("baseline", str, choices=VARIANTS),
    "model.backbone": _Key("toy-vgg", str, choices=BACKBONES),
    "model.num_classes": _Key(3, int),
    "model.head_hidden": _Key(256, int),
    "model.roi_align": _Key(False, _parse_bool, _fmt_bool),
    "model.context": _Key("auto", str, choices=("auto", "true", "false")),
    "model.context_heads": _Key(1, int),
    "model.keep_value_proj": _Key(False, _parse_bool, _fmt_bool),
    "model.context_on_loc": _Key(False, _parse_bool, _fmt_bool),
    "model.loc_last": _Key("auto", str, choices=("auto", "pool", "remove", "conv", "pool_s1")),
    "model.cls_last": _Key("auto", str, choices=("auto", "pool", "remove")),
    "model.dual_rpn": _Key(False, _parse_bool, _fmt_bool),
    "model.det_last_stride": _Key(1, int, choices=(1, 2)),
    "anchors.sizes": _Key(tuple(float(s) for s in COCO_ANCHOR_SIZES), _parse_floats, _fmt_floats),
    "anchors.ratios": _Key(tuple(float(r) for r in ANCHOR_RATIOS), _parse_floats, _fmt_floats),
    "train.iterations": _Key(320_000, int),
    "train.lr_schedule": _Key(COCO_SCHEDULE, _parse_schedule, _fmt_schedule),
    "train.momentum": _Key(0.9, float, repr),
    "train.weight_decay": _Key(0.0, float, repr),
    "train.rpn_batch": _Key(256, int),
    "train.rpn_fg_fraction": _Key(0.5, float, repr),
    "train.rpn_fg_iou": _Key(0.7, float, repr),
    "train.rpn_bg_iou": _Key(0.3, float, repr),
    "train.roi_batch": _Key(128, int),
    "train.fg_fraction": _Key(0.25, float, repr),
    "train.fg_iou": _Key(0.5, float, repr),
    "train.bg_iou_lo": _Key(0.1, float, repr),
    "train.bg_iou_hi": _Key(0.5, float, repr),
    "train.pre_nms": _Key(6000, int),
    "train.post_nms": _Key(2000, int),
    "train.rpn_nms": _Key(0.7, float, repr),
    "train.flip": _Key(True, _parse_bool, _fmt_bool),
    "train.seed": _Key(0, int),
    "train.checkpoint_every": _Key(500, int),
    "train.log_every": _Key(20, int),
    "data.path": _Key("", str),
    "data.train_scenes": _Key(0, int),
    "data.shorter_side": _Key(600, int),
    "output.dir": _Key("runs/default", str),
    "eval.nms": _Key(0.3, float, repr),
    "eval.rois": _Key(300, int),
    "eval.pre_nms": _Key(6000, int),
    "eval.score_threshold": _Key(0.05, float, repr),
    "eval.max_detections": _Key(300, int),
    "eval.interpolation": _Key("coco101", str, choices=("coco101", "voc11")),
}

# run-location keys, left out of checkpoint snapshots so reruns elsewhere are byte-identical
LOCATION_KEYS = ("output.dir",)


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: {k: s.default for k, s in SCHEMA.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **updates) -> "ExperimentConfig":
        """Copy with ``section__key=value`` overrides (double underscore for the dot)."""
        vals = dict(self.values)
        for k, v in updates.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigurationError(f"{key}: unknown configuration key")
            vals[key] = v
        cfg = ExperimentConfig(vals)
        cfg.validate()
        return cfg

    def to_text(self, include_location: bool = True) -> str:
        lines = []
        for key in sorted(self.values):
            if not include_location and key in LOCATION_KEYS:
                continue
            lines.append(f"{key} = {SCHEMA[key].fmt(self.values[key])}")
        return "\n".join(lines) + "\n"

    def validate(self) -> None:
        v = self.values
        for key, spec in SCHEMA.items():
            if spec.choices and v[key] not in spec.choices:
                raise ConfigurationError(f"{key}: {v[key]!r} is not one of {', '.join(map(str, spec.choices))}")
        for key in ("model.num_classes", "model.head_hidden", "model.context_heads", "train.rpn_batch",
                    "train.roi_batch", "train.checkpoint_every", "train.log_every", "eval.rois",
                    "train.pre_nms", "train.post_nms", "eval.pre_nms", "eval.max_detections"):
            if v[key] < 1:
                raise ConfigurationError(f"{key}: must be >= 1 (got {v[key]})")
        for key in ("train.iterations", "data.train_scenes", "data.shorter_side"):
            if v[key] < 0:
                raise ConfigurationError(f"{key}: must be >= 0 (got {v[key]})")
        for key in ("anchors.sizes", "anchors.ratios"):
            if any(x <= 0 for x in v[key]):
                raise ConfigurationError(f"{key}: values must be positive")
        try:
            branch_spec_for(v["model.variant"], v["model.backbone"], dual_rpn=v["model.dual_rpn"])
        except ConfigurationError as exc:
            raise ConfigurationError(f"model.variant: {exc}") from None
        try:
            self.train_config()
        except ConfigurationError as exc:
            raise ConfigurationError(f"train: {exc}") from None

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr_schedule=v["train.lr_schedule"], momentum=v["train.momentum"],
            weight_decay=v["train.weight_decay"], rpn_batch=v["train.rpn_batch"],
            rpn_fg_fraction=v["train.rpn_fg_fraction"], rpn_fg_iou=v["train.rpn_fg_iou"],
            rpn_bg_iou=v["train.rpn_bg_iou"], roi_batch=v["train.roi_batch"],
            fg_fraction=v["train.fg_fraction"], fg_iou=v["train.fg_iou"],
            bg_iou_range=(v["train.bg_iou_lo"], v["train.bg_iou_hi"]), flip=v["train.flip"],
            shorter_side=v["data.shorter_side"] or None, seed=v["train.seed"],
        )

    def proposal_settings(self) -> ProposalSettings:
        v = self.values
        return ProposalSettings(train_pre_nms=v["train.pre_nms"], train_post_nms=v["train.post_nms"],
                                test_pre_nms=v["eval.pre_nms"], test_post_nms=v["eval.rois"],
                                rpn_nms=v["train.rpn_nms"], test_nms=v["eval.nms"],
                                score_threshold=v["eval.score_threshold"],
                                max_detections=v["eval.max_detections"])

    def build_model(self) -> ModelGraph:
        v = self.values
        auto = lambda key: None if v[key] == "auto" else v[key]  # noqa: E731
        context = auto("model.context")
        return build_model(
            v["model.variant"], v["model.backbone"], v["model.num_classes"], v["train.seed"],
            anchor_sizes=v["anchors.sizes"], anchor_ratios=v["anchors.ratios"],
            head_hidden=v["model.head_hidden"], roi_align=v["model.roi_align"],
            context_heads=v["model.context_heads"], keep_value_proj=v["model.keep_value_proj"],
            loc_last=auto("model.loc_last"), cls_last=auto("model.cls_last"),
            context=None if context is None else context == "true",
            det_last_stride=v["model.det_last_stride"], dual_rpn=v["model.dual_rpn"],
            context_on_loc=v["model.context_on_loc"], proposals=self.proposal_settings(),
        )


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values = dict((base or ExperimentConfig()).values)
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        if key not in SCHEMA:
            raise ConfigurationError(f"{key}: unknown configuration key (line {lineno})")
        if key in seen:
            raise ConfigurationError(f"{key}: set twice (line {lineno})")
        seen.add(key)
        try:
            values[key] = SCHEMA[key].parse(val)
        except ValueError as exc:
            raise ConfigurationError(f"{key}: {exc}") from None
    cfg = ExperimentConfig(values)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
