"""Two-stage detector graphs with separable classification / localization branches.

A model is a declarative :class:`BranchSpec` (shared trunk, per-branch layer
lists, head layout) compiled into named parameter tensors. Layers that carry
the same ``name`` share parameters, which is how a branch can reuse kernels
with a different stride.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import functional as F
from .attention import AttentionWeights, global_context_attend, init_attention
from .boxes import AnchorGrid, clip_to_image, decode_box, generate_anchors, nms
from .errors import ConfigurationError, DimensionError, StateError
from .tensor import Tensor, mean_axes, mul, no_grad, relu, reshape, transpose

VARIANTS = ("baseline", "detect_f", "detect_rf", "detect_s", "grcn", "resnet_det")
BACKBONES = ("toy-vgg", "toy-resnet")
LAYER_KINDS = ("conv", "maxpool", "relu", "linear", "residual", "gap")

COCO_ANCHOR_SIZES = (32, 64, 128, 256, 512)
VOC_ANCHOR_SIZES = (128, 256, 512)
ANCHOR_RATIOS = (0.5, 1.0, 2.0)
BBOX_STD = (0.1, 0.1, 0.2, 0.2)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    kernel: tuple = (1, 1)
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or min(self.kernel) < 1:
            raise ConfigurationError(f"layer {self.name or self.kind}: stride and kernel must be >= 1")
        if self.padding < 0:
            raise ConfigurationError(f"layer {self.name or self.kind}: padding must be >= 0")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "linear", "residual")


def conv(name, cin, cout, k=3, stride=1, padding=None) -> LayerSpec:
    return LayerSpec("conv", name, (k, k), stride, k // 2 if padding is None else padding, cin, cout)


def pool(k=2, stride=2) -> LayerSpec:
    return LayerSpec("maxpool", "", (k, k), stride)


def res(name, cin, cout, stride=1) -> LayerSpec:
    return LayerSpec("residual", name, (3, 3), stride, 1, cin, cout)


RELU = LayerSpec("relu")
GAP = LayerSpec("gap")


def effective_stride(layers: Sequence[LayerSpec]) -> int:
    """Spacing in input pixels between adjacent output cells: product of strides."""
    out = 1
    for layer in layers:
        out *= layer.stride
    return out


@dataclass(frozen=True)
class HeadSpec:
    """Per-ROI head. ``mode`` is how the cls/loc outputs use the body:

    * ``shared``: one body; split models run it once per branch (shared weights)
    * ``separate``: an independent body per task
    * ``averaged``: two bodies whose features are averaged and feed both tasks
    """

    body: tuple
    mode: str = "shared"
    roi_out_size: int = 7

    @property
    def kind(self) -> str:
        family = "conv_block" if any(l.kind == "residual" for l in self.body) else "mlp"
        if family == "mlp":
            return {"shared": "shared_mlp", "separate": "separate_mlp", "averaged": "averaged_mlp"}[self.mode]
        return {"shared": "conv_block", "separate": "separate_conv_block",
                "averaged": "averaged_conv_block"}[self.mode]


@dataclass(frozen=True)
class BranchSpec:
    shared_layers: tuple
    cls_layers: tuple = ()
    loc_layers: tuple = ()
    head: HeadSpec = HeadSpec(())
    use_context_attention: bool = False
    context_on_loc: bool = False
    dual_rpn: bool = False

    @property
    def split(self) -> bool:
        return bool(self.cls_layers or self.loc_layers)

    @property
    def cls_stride(self) -> int:
        return effective_stride(self.shared_layers + self.cls_layers)

    @property
    def loc_stride(self) -> int:
        return effective_stride(self.shared_layers + self.loc_layers)

    @property
    def roi_out_size(self) -> int:
        return self.head.roi_out_size


@dataclass
class ProposalSettings:
    train_pre_nms: int = 6000
    train_post_nms: int = 2000
    test_pre_nms: int = 6000
    test_post_nms: int = 300
    rpn_nms: float = 0.7
    test_nms: float = 0.3
    score_threshold: float = 0.05
    max_detections: int = 300


@dataclass
class ModelGraph:
    variant: str = ""
    backbone: str = ""
    num_classes: int = 0
    branch_spec: Optional[BranchSpec] = None
    parameters: dict = field(default_factory=dict)
    anchor_sizes: tuple = COCO_ANCHOR_SIZES
    anchor_ratios: tuple = ANCHOR_RATIOS
    context_out_size: int = 14
    roi_align: bool = False
    bbox_std: tuple = BBOX_STD
    proposals: ProposalSettings = field(default_factory=ProposalSettings)
    attention: dict = field(default_factory=dict)

    @property
    def built(self) -> bool:
        return self.branch_spec is not None and bool(self.parameters)

    def require_built(self) -> None:
        if not self.built:
            raise StateError("model graph has not been built; use build_model()")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self.parameters.items())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters.values()))

    def zero_grad(self) -> None:
        for t in self.parameters.values():
            t.zero_grad()

    @property
    def cls_stride(self) -> int:
        return self.branch_spec.cls_stride

    @property
    def loc_stride(self) -> int:
        return self.branch_spec.loc_stride

    @property
    def rpn_prefixes(self) -> tuple:
        return ("rpn", "rpn_loc") if self.branch_spec.dual_rpn else ("rpn",)

    def exclusive_parameters(self, branch: str) -> list[str]:
        """Names of parameters only the ``branch`` ('cls' or 'loc') task path can reach."""
        spec = self.branch_spec
        own = spec.cls_layers if branch == "cls" else spec.loc_layers
        other = spec.loc_layers if branch == "cls" else spec.cls_layers
        other_names = {l.name for l in other}
        names = {l.name for l in own if l.has_params and l.name not in other_names}
        if branch == "cls":
            names |= {"cls_score", "ctx_cls", "head_cls"}
            if spec.dual_rpn:
                names.add("rpn")
        else:
            names |= {"bbox_pred", "ctx_loc", "head_loc"}
            if spec.dual_rpn:
                names.add("rpn_loc")
        return sorted(p for p in self.parameters if p.split(".")[0] in names)


# -- architecture templates ---------------------------------------------------

def _vgg_block(i: int, cin: int, cout: int, prefix: str = "", last: str = "pool") -> list[LayerSpec]:
    layers = [conv(f"{prefix}conv{i}", cin, cout), RELU]
    if last == "pool":
        layers.append(pool(2, 2))
    elif last == "pool_s1":
        layers.append(pool(2, 1))
    elif last == "conv":
        layers += [conv(f"{prefix}down{i}", cout, cout, k=2, stride=2, padding=0), RELU]
    elif last != "remove":
        raise ConfigurationError(f"unknown last-layer option {last!r} (pool, remove, conv, pool_s1)")
    return layers


def _mlp_body(hidden: int) -> tuple:
    return (LayerSpec("linear", "fc1", out_channels=hidden), RELU,
            LayerSpec("linear", "fc2", in_channels=hidden, out_channels=hidden), RELU)


def _toy_vgg(variant: str, hidden: int, loc_last: str, cls_last: str, context: Optional[bool]) -> BranchSpec:
    ch = (3, 16, 32, 64, 128)
    low = []
    for i in range(1, 4):
        low += _vgg_block(i, ch[i - 1], ch[i])
    trunk = tuple(low + _vgg_block(4, ch[3], ch[4]))
    mlp = _mlp_body(hidden)
    if variant == "baseline":
        return BranchSpec(trunk, head=HeadSpec(mlp))
    if variant == "detect_rf":
        return BranchSpec(trunk, head=HeadSpec(mlp, "separate"))
    if variant == "detect_s":
        return BranchSpec(trunk, head=HeadSpec(mlp, "averaged"))
    if variant in ("detect_f", "grcn"):
        if variant == "grcn":
            loc_last = "remove" if loc_last is None else loc_last
            context = True if context is None else context
        cls = tuple(_vgg_block(4, ch[3], ch[4], "cls.", cls_last or "pool"))
        loc = tuple(_vgg_block(4, ch[3], ch[4], "loc.", loc_last or "pool"))
        return BranchSpec(tuple(low), cls, loc, HeadSpec(mlp), bool(context))
    raise ConfigurationError(f"variant {variant!r} is not defined for backbone 'toy-vgg'")


def _toy_resnet(variant: str, hidden: int, det_last_stride: int, context: Optional[bool]) -> BranchSpec:
    stem = (conv("stem", 3, 16, 3, 2), RELU, pool(2, 2), res("res1", 16, 16), res("res2", 16, 32, 2))
    res3 = (res("res3a", 32, 64, 2), res("res3b", 64, 64))
    conv5_head = HeadSpec((res("res4", 64, 128, 2), GAP), roi_out_size=14)
    if variant == "baseline":
        return BranchSpec(stem + res3, head=conv5_head)
    if variant == "resnet_det":
        trunk = stem + res3 + (res("res4", 64, 128, det_last_stride),)
        return BranchSpec(trunk, head=HeadSpec(_mlp_body(hidden)))
    if variant == "detect_rf":
        return BranchSpec(stem + res3, head=replace(conv5_head, mode="separate"))
    if variant == "detect_s":
        return BranchSpec(stem + res3, head=replace(conv5_head, mode="averaged"))
    if variant == "detect_f":
        return BranchSpec(stem + res3[:1], (res("cls.res3b", 64, 64),), (res("loc.res3b", 64, 64),),
                          conv5_head, bool(context))
    if variant == "grcn":
        # first block of the split stage shares kernels; the loc copy runs at stride 1
        cls = (res("res3a", 32, 64, 2), res("cls.res3b", 64, 64))
        loc = (res("res3a", 32, 64, 1), res("loc.res3b", 64, 64))
        return BranchSpec(stem, cls, loc, conv5_head, True if context is None else context)
    raise ConfigurationError(f"variant {variant!r} is not defined for backbone 'toy-resnet'")


def branch_spec_for(variant: str, backbone: str, head_hidden: int = 256, loc_last: Optional[str] = None,
                    cls_last: Optional[str] = None, context: Optional[bool] = None,
                    det_last_stride: int = 1, dual_rpn: bool = False,
                    context_on_loc: bool = False) -> BranchSpec:
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; valid: {', '.join(VARIANTS)}")
    if backbone == "toy-vgg":
        spec = _toy_vgg(variant, head_hidden, loc_last, cls_last, context)
    elif backbone == "toy-resnet":
        spec = _toy_resnet(variant, head_hidden, det_last_stride, context)
    else:
        raise ConfigurationError(f"unknown backbone {backbone!r}; valid: {', '.join(BACKBONES)}")
    if dual_rpn and not spec.split:
        raise ConfigurationError("dual_rpn requires a variant with split branches")
    return replace(spec, dual_rpn=dual_rpn, context_on_loc=context_on_loc)


# -- parameter construction -------------------------------------------------------

def _rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, zlib.crc32(name.encode())])))


def _out_channels(layers: Sequence[LayerSpec], cin: int) -> int:
    for layer in layers:
        if layer.kind in ("conv", "residual"):
            cin = layer.out_channels
    return cin


class _ParamBuilder:
    def __init__(self, seed: int):
        self.seed = seed
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, shape: tuple, std: float) -> None:
        if name in self.params:
            if self.params[name].shape != shape:
                raise ConfigurationError(f"shared parameter {name} used with shapes "
                                         f"{self.params[name].shape} and {shape}")
            return
        data = _rng_for(self.seed, name).standard_normal(shape) * std if std else np.zeros(shape)
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def conv(self, name, cin, cout, k, std=None):
        self.add(f"{name}.weight", (cout, cin, k, k), std if std is not None else F.he_std(cin * k * k))
        self.add(f"{name}.bias", (cout,), 0.0)

    def linear(self, name, din, dout, std=None):
        self.add(f"{name}.weight", (din, dout), std if std is not None else F.he_std(din))
        self.add(f"{name}.bias", (dout,), 0.0)

    def layers(self, layers: Sequence[LayerSpec], prefix: str = "", features: int = 0) -> int:
        """Create parameters for ``layers``; returns output channels (or features)."""
        for layer in layers:
            name = prefix + layer.name
            if layer.kind == "conv":
                self.conv(name, layer.in_channels, layer.out_channels, layer.kernel[0])
                features = layer.out_channels
            elif layer.kind == "residual":
                cin, cout = layer.in_channels, layer.out_channels
                self.conv(f"{name}.conv1", cin, cout, 3)
                self.conv(f"{name}.conv2", cout, cout, 3)
                if cin != cout:
                    self.conv(f"{name}.proj", cin, cout, 1)
                features = cout
            elif layer.kind == "linear":
                self.linear(name, features, layer.out_channels)
                features = layer.out_channels
        return features


def build_model(variant: str, backbone: str, num_classes: int, seed: int = 0, *,
                anchor_sizes: Sequence[float] = COCO_ANCHOR_SIZES,
                anchor_ratios: Sequence[float] = ANCHOR_RATIOS,
                head_hidden: int = 256, roi_align: bool = False, context_heads: int = 1,
                keep_value_proj: bool = False, loc_last: Optional[str] = None,
                cls_last: Optional[str] = None, context: Optional[bool] = None,
                det_last_stride: int = 1, dual_rpn: bool = False, context_on_loc: bool = False,
                proposals: Optional[ProposalSettings] = None) -> ModelGraph:
    """Compile an architecture variant into a model with seeded parameters."""
    if num_classes < 1:
        raise ConfigurationError("num_classes must be >= 1")
    spec = branch_spec_for(variant, backbone, head_hidden, loc_last, cls_last, context,
                           det_last_stride, dual_rpn, context_on_loc)
    pb = _ParamBuilder(seed)
    trunk_c = pb.layers(spec.shared_layers)
    cls_c = pb.layers(spec.cls_layers, features=trunk_c)
    loc_c = pb.layers(spec.loc_layers, features=trunk_c)
    if cls_c != loc_c:
        raise ConfigurationError(f"cls and loc branches end with different channels ({cls_c}, {loc_c})")

    n_anchor = len(anchor_sizes) * len(anchor_ratios)
    for prefix in (("rpn", "rpn_loc") if spec.dual_rpn else ("rpn",)):
        pb.conv(f"{prefix}.conv", cls_c, cls_c, 3, std=0.01)
        pb.conv(f"{prefix}.cls", cls_c, 2 * n_anchor, 1, std=0.01)
        pb.conv(f"{prefix}.reg", cls_c, 4 * n_anchor, 1, std=0.01)

    attention = {}
    if spec.use_context_attention:
        attention["cls"] = _attention_params(pb, "ctx_cls", cls_c, seed, keep_value_proj, context_heads)
    if spec.context_on_loc:
        attention["loc"] = _attention_params(pb, "ctx_loc", loc_c, seed, keep_value_proj, context_heads)

    head = spec.head
    o = head.roi_out_size
    head_in = cls_c if head.body[0].kind == "residual" else cls_c * o * o
    prefixes = {"shared": ("head.",), "separate": ("head_cls.", "head_loc."),
                "averaged": ("head_a.", "head_b.")}[head.mode]
    for prefix in prefixes:
        feat = pb.layers(head.body, prefix, features=head_in)
    pb.linear("cls_score", feat, num_classes + 1, std=0.01)
    pb.linear("bbox_pred", feat, 4 * (num_classes + 1), std=0.001)

    return ModelGraph(variant, backbone, num_classes, spec, pb.params, tuple(anchor_sizes),
                      tuple(anchor_ratios), roi_align=roi_align,
                      proposals=proposals or ProposalSettings(), attention=attention)


def _attention_params(pb: _ParamBuilder, name: str, dim: int, seed: int, keep_v: bool, heads: int):
    w = init_attention(dim, _rng_for(seed, name), keep_v, heads)
    for suffix, t in (("w_p", w.w_p), ("w_k", w.w_k), ("w_v", w.w_v)):
        if t is not None:
            t.name = f"{name}.{suffix}"
            pb.params[t.name] = t
    return w


def attention_weights(model: ModelGraph, branch: str) -> AttentionWeights:
    w = model.attention[branch]
    prefix = f"ctx_{branch}"
    p = model.parameters
    return AttentionWeights(p[f"{prefix}.w_p"], p[f"{prefix}.w_k"], p.get(f"{prefix}.w_v"), w.num_heads)


# -- forward pieces ---------------------------------------------------------------

def _conv(model, name, x, stride, padding):
    p = model.parameters
    return F.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride, padding)


def run_layers(model: ModelGraph, layers: Sequence[LayerSpec], x: Tensor, prefix: str = "") -> Tensor:
    p = model.parameters
    for layer in layers:
        name = prefix + layer.name
        if layer.kind == "conv":
            x = _conv(model, name, x, layer.stride, layer.padding)
        elif layer.kind == "relu":
            x = relu(x)
        elif layer.kind == "maxpool":
            x = F.maxpool2d(x, layer.kernel, layer.stride, layer.padding)
        elif layer.kind == "residual":
            y = relu(_conv(model, f"{name}.conv1", x, layer.stride, 1))
            y = _conv(model, f"{name}.conv2", y, 1, 1)
            if f"{name}.proj.weight" in p:
                sc = _conv(model, f"{name}.proj", x, layer.stride, 0)
            elif layer.stride != 1:
                sc = F.maxpool2d(x, (1, 1), layer.stride)
            else:
                sc = x
            x = relu(y + sc)
        elif layer.kind == "gap":
            x = mean_axes(x, (2, 3))
        elif layer.kind == "linear":
            if x.ndim != 2:
                x = reshape(x, (x.shape[0], -1))
            x = F.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])
    return x


def backbone_forward(model: ModelGraph, image: Tensor):
    """Return (cls_features, loc_features); the same tensor when the trunk is not split."""
    model.require_built()
    if image.ndim != 4 or image.shape[:2] != (1, 3):
        raise DimensionError(f"image must be 1x3xHxW, got {image.shape}")
    spec = model.branch_spec
    trunk = run_layers(model, spec.shared_layers, image)
    if not spec.split:
        return trunk, trunk
    return run_layers(model, spec.cls_layers, trunk), run_layers(model, spec.loc_layers, trunk)


def anchor_grid_for(model: ModelGraph, features: Tensor, stride: int) -> AnchorGrid:
    return generate_anchors(features.shape[2], features.shape[3], stride, model.anchor_sizes,
                            model.anchor_ratios)


def rpn_forward(model: ModelGraph, features: Tensor, grid: AnchorGrid, prefix: str = "rpn"):
    """Objectness logits (A, 2) and deltas (A, 4), rows in anchor-grid order."""
    if features.ndim != 4 or features.shape[2:] != (grid.feature_h, grid.feature_w):
        raise DimensionError(f"rpn features {features.shape[2:]} do not match anchor grid "
                             f"({grid.feature_h}, {grid.feature_w})")
    h = relu(_conv(model, f"{prefix}.conv", features, 1, 1))
    logits = _conv(model, f"{prefix}.cls", h, 1, 0)
    deltas = _conv(model, f"{prefix}.reg", h, 1, 0)
    if logits.shape[1] != 2 * grid.per_cell:
        raise DimensionError(f"rpn predicts {logits.shape[1] // 2} anchors per cell, grid has {grid.per_cell}")
    logits = reshape(transpose(logits, (0, 2, 3, 1)), (-1, 2))
    deltas = reshape(transpose(deltas, (0, 2, 3, 1)), (-1, 4))
    return logits, deltas


def foreground_scores(objectness) -> np.ndarray:
    z = np.asarray(objectness.data if isinstance(objectness, Tensor) else objectness)
    return 1.0 / (1.0 + np.exp(z[:, 0] - z[:, 1]))


def select_proposals(objectness, deltas, grid: AnchorGrid, image_size, pre_nms_n: int,
                     post_nms_n: int, nms_thr: float):
    """Decode, clip, rank by foreground probability, NMS, truncate.

    Returns (boxes (P, 4), scores (P,)).
    """
    w, h = image_size
    d = np.asarray(deltas.data if isinstance(deltas, Tensor) else deltas).reshape(-1, 4)
    scores = foreground_scores(objectness)
    if d.shape[0] != len(grid) or scores.shape[0] != len(grid):
        raise DimensionError(f"{d.shape[0]} deltas / {scores.shape[0]} scores for {len(grid)} anchors")
    boxes = clip_to_image(decode_box(grid.boxes, d), w, h)
    order = np.lexsort((np.arange(scores.size), -scores))[:pre_nms_n]
    keep = nms(boxes[order], scores[order], nms_thr)[:post_nms_n]
    idx = order[keep]
    return boxes[idx], scores[idx]


def pool_rois(model: ModelGraph, features: Tensor, rois, stride: int, out_size: int) -> Tensor:
    if model.roi_align:
        return F.roi_align(features, rois, out_size, stride)
    return F.roi_pool(features, rois, out_size, stride)


def context_enhance(model: ModelGraph, branch: str, pooled: Tensor, features: Tensor, image_size,
                    stride: int) -> Tensor:
    """Apply global-context attention to ROI features of one branch."""
    w, h = image_size
    n, c, o, _ = pooled.shape
    m = model.context_out_size
    ctx = pool_rois(model, features, np.array([[0.0, 0.0, w, h]]), stride, m)  # 1, c, m, m
    V = transpose(reshape(ctx, (c, m * m)), (1, 0))
    P = transpose(reshape(pooled, (n, c, o * o)), (0, 2, 1))
    out = global_context_attend(P, V, attention_weights(model, branch))
    return reshape(transpose(out, (0, 2, 1)), (n, c, o, o))


def head_forward(model: ModelGraph, cls_pooled: Tensor, loc_pooled: Tensor, same_input: bool = False):
    """Class logits (R, K+1) and class-specific deltas (R, 4(K+1))."""
    head = model.branch_spec.head
    p = model.parameters

    def out(name, x):
        return F.linear(x, p[f"{name}.weight"], p[f"{name}.bias"])

    if head.mode == "shared":
        fc = run_layers(model, head.body, cls_pooled, "head.")
        fl = fc if same_input else run_layers(model, head.body, loc_pooled, "head.")
    elif head.mode == "separate":
        fc = run_layers(model, head.body, cls_pooled, "head_cls.")
        fl = run_layers(model, head.body, loc_pooled, "head_loc.")
    else:
        fa = run_layers(model, head.body, cls_pooled, "head_a.")
        fb = run_layers(model, head.body, cls_pooled, "head_b.")
        fc = fl = mul(fa + fb, 0.5)
        if not same_input:
            la = run_layers(model, head.body, loc_pooled, "head_a.")
            lb = run_layers(model, head.body, loc_pooled, "head_b.")
            fl = mul(la + lb, 0.5)
    return out("cls_score", fc), out("bbox_pred", fl)


@dataclass
class Detections:
    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    proposals: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))


@dataclass
class DetectorPass:
    """Intermediate state of one image through the detector."""

    image_size: tuple
    cls_features: Tensor
    loc_features: Tensor
    rpn: dict  # prefix -> (grid, objectness, deltas)
    proposals: np.ndarray
    proposal_scores: np.ndarray
    run_head: Callable
    records: dict = field(default_factory=dict)


def forward_detect(model: ModelGraph, image: Tensor, mode: str = "test"):
    """Run the detector on one preprocessed 1x3xHxW image.

    ``mode='train'`` returns a :class:`DetectorPass` whose ``run_head(rois)``
    evaluates both task paths on chosen ROIs. ``mode='test'`` returns
    :class:`Detections` after per-class NMS and score thresholding.
    """
    if mode not in ("train", "test"):
        raise ConfigurationError(f"mode must be 'train' or 'test', got {mode!r}")
    model.require_built()
    if mode == "test":
        with no_grad():
            return _detect(model, image)
    return _forward(model, image, training=True)


def _forward(model: ModelGraph, image: Tensor, training: bool) -> DetectorPass:
    spec = model.branch_spec
    image_size = (image.shape[3], image.shape[2])
    cls_feat, loc_feat = backbone_forward(model, image)
    cfg = model.proposals
    pre_n = cfg.train_pre_nms if training else cfg.test_pre_nms
    post_n = cfg.train_post_nms if training else cfg.test_post_nms
    rpn = {}
    boxes, scores = [], []
    branch_feats = {"rpn": (cls_feat, spec.cls_stride), "rpn_loc": (loc_feat, spec.loc_stride)}
    for prefix in model.rpn_prefixes:
        feat, stride = branch_feats[prefix]
        grid = anchor_grid_for(model, feat, stride)
        obj, dlt = rpn_forward(model, feat, grid, prefix)
        rpn[prefix] = (grid, obj, dlt)
        b, s = select_proposals(obj, dlt, grid, image_size, pre_n, post_n, cfg.rpn_nms)
        boxes.append(b)
        scores.append(s)
    proposals = np.concatenate(boxes)
    proposal_scores = np.concatenate(scores)
    records: dict = {}

    def run_head(rois):
        rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
        o = spec.roi_out_size
        cls_pooled = pool_rois(model, cls_feat, rois, spec.cls_stride, o)
        same = not spec.split and not spec.use_context_attention and not spec.context_on_loc
        loc_pooled = cls_pooled if not spec.split else pool_rois(model, loc_feat, rois, spec.loc_stride, o)
        records["cls_bin_edges"] = F.roi_bin_edges(rois, o, spec.cls_stride)
        records["loc_bin_edges"] = F.roi_bin_edges(rois, o, spec.loc_stride)
        records["cls_pooled"] = cls_pooled
        records["loc_pooled"] = loc_pooled
        if spec.use_context_attention:
            cls_pooled = context_enhance(model, "cls", cls_pooled, cls_feat, image_size, spec.cls_stride)
        if spec.context_on_loc:
            loc_pooled = context_enhance(model, "loc", loc_pooled, loc_feat, image_size, spec.loc_stride)
        return head_forward(model, cls_pooled, loc_pooled, same_input=same)

    return DetectorPass(image_size, cls_feat, loc_feat, rpn, proposals, proposal_scores, run_head, records)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _detect(model: ModelGraph, image: Tensor) -> Detections:
    fp = _forward(model, image, training=False)
    w, h = fp.image_size
    k = model.num_classes
    rois = fp.proposals
    if rois.shape[0] == 0:
        empty = np.zeros((0, 4))
        return Detections(empty, np.zeros(0), np.zeros(0, dtype=np.int64), rois)
    logits, deltas = fp.run_head(rois)
    probs = _softmax_np(logits.data)
    d = deltas.data.reshape(-1, k + 1, 4) * np.asarray(model.bbox_std)
    cfg = model.proposals
    out_b, out_s, out_l = [], [], []
    for c in range(1, k + 1):
        s = probs[:, c]
        sel = np.nonzero(s > cfg.score_threshold)[0]
        if sel.size == 0:
            continue
        b = clip_to_image(decode_box(rois[sel], d[sel, c]), w, h)
        keep = nms(b, s[sel], cfg.test_nms)
        out_b.append(b[keep])
        out_s.append(s[sel][keep])
        out_l.append(np.full(len(keep), c - 1, dtype=np.int64))
    if not out_b:
        return Detections(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64), rois)
    boxes, scores, labels = np.concatenate(out_b), np.concatenate(out_s), np.concatenate(out_l)
    order = np.lexsort((np.arange(scores.size), -scores))[:cfg.max_detections]
    return Detections(boxes[order], scores[order], labels[order], rois)


# -- architecture dump --------------------------------------------------------------

def _layer_params(model: ModelGraph, name: str) -> int:
    if not name:
        return 0
    return int(sum(t.size for n, t in model.parameters.items() if n.startswith(name + ".")))


def describe(model: ModelGraph) -> str:
    """Plain-text layer table with per-branch cumulative strides and parameter counts."""
    model.require_built()
    spec = model.branch_spec
    rows = []
    counted: set[str] = set()

    def emit(section, layers, start_stride=1):
        cum = start_stride
        for layer in layers:
            cum *= layer.stride
            params = _layer_params(model, layer.name) if layer.name not in counted else 0
            if layer.name:
                counted.add(layer.name)
            k = f"{layer.kernel[0]}x{layer.kernel[1]}" if layer.kind in ("conv", "maxpool", "residual") else "-"
            rows.append((section, layer.name or "-", layer.kind, k, layer.stride, cum, params))
        return cum

    trunk = emit("trunk", spec.shared_layers)
    if spec.split:
        emit("cls", spec.cls_layers, trunk)
        emit("loc", spec.loc_layers, trunk)
    for prefix in model.rpn_prefixes:
        stride = spec.cls_stride if prefix == "rpn" else spec.loc_stride
        for part in ("conv", "cls", "reg"):
            name = f"{prefix}.{part}"
            rows.append((prefix, name, "conv", "3x3" if part == "conv" else "1x1", 1, stride,
                         _layer_params(model, name)))
    for branch in sorted(model.attention):
        name = f"ctx_{branch}"
        rows.append((f"context/{branch}", name, "attention", "-", 1, "-", _layer_params(model, name)))
    head_prefixes = {"shared": ("head",), "separate": ("head_cls", "head_loc"),
                     "averaged": ("head_a", "head_b")}[spec.head.mode]
    for hp in head_prefixes:
        for layer in spec.head.body:
            name = f"{hp}.{layer.name}" if layer.name else "-"
            k = f"{layer.kernel[0]}x{layer.kernel[1]}" if layer.kind == "residual" else "-"
            rows.append((hp, name, layer.kind, k, layer.stride, "-",
                         _layer_params(model, name) if layer.name else 0))
    for name in ("cls_score", "bbox_pred"):
        rows.append(("head", name, "linear", "-", 1, "-", _layer_params(model, name)))

    header = ("section", "layer", "kind", "kernel", "stride", "cum_stride", "params")
    table = [header] + [tuple(str(v) for v in r) for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = [f"variant={model.variant} backbone={model.backbone} num_classes={model.num_classes}"]
    lines += ["  ".join(v.ljust(widths[i]) for i, v in enumerate(r)).rstrip() for r in table]
    lines.append(f"head={spec.head.kind} roi_out_size={spec.roi_out_size} "
                 f"context_cls={spec.use_context_attention} context_loc={spec.context_on_loc}")
    lines.append(f"trunk_stride={trunk} cls_stride={spec.cls_stride} loc_stride={spec.loc_stride}")
    lines.append(f"total_params={model.num_parameters()}")
    return "\n".join(lines) + "\n"
