"""Synthetic shape scenes, their on-disk layout, and image preprocessing.

Dataset directory layout::

    meta.json       {"num_classes", "seed", "width", "height", "count"}
    scenes.jsonl    one scene per line:
                    {"image": "<file>", "width": W, "height": H,
                     "objects": [{"x1", "y1", "x2", "y2", "class"}, ...]}
    <file>          1x3xHxW image in the binary tensor format, values in [0, 1]
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor, load_tensor, save_tensor

ARCHETYPES = (
    ("circle", (0.92, 0.12, 0.12)),
    ("square", (0.10, 0.78, 0.18)),
    ("triangle", (0.12, 0.28, 0.95)),
    ("circle", (0.96, 0.86, 0.08)),
    ("square", (0.86, 0.16, 0.86)),
    ("triangle", (0.08, 0.86, 0.86)),
)

SMALL_AREA = 32 * 32
LARGE_AREA = 96 * 96
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class SyntheticScene:
    image: np.ndarray  # 1x3xHxW in [0, 1]
    boxes: np.ndarray  # (G, 4)
    classes: np.ndarray  # (G,)
    name: str = ""

    @property
    def width(self) -> int:
        return self.image.shape[3]

    @property
    def height(self) -> int:
        return self.image.shape[2]


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5CE7E, index])))


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.30, 0.60)
    tint = rng.uniform(-0.04, 0.04, 3)
    img = np.empty((3, h, w))
    pattern = np.zeros((h, w))
    for _ in range(3):
        fx, fy = rng.uniform(1.0, 8.0, 2)
        phase = rng.uniform(0, 2 * math.pi)
        pattern += np.sin(2 * math.pi * (fx * xx + fy * yy) + phase)
    pattern *= 0.05
    for ch in range(3):
        img[ch] = base + tint[ch] + pattern + rng.normal(0.0, 0.03, (h, w))
    return img


def _shape_mask(kind: str, h: int, w: int, x0: float, y0: float, side: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    if kind == "circle":
        r = side / 2
        return (xs - (x0 + r)) ** 2 + (ys - (y0 + r)) ** 2 <= r * r
    if kind == "square":
        return (xs >= x0) & (xs < x0 + side) & (ys >= y0) & (ys < y0 + side)
    if kind == "triangle":
        # apex at top centre, base along the bottom edge
        u = (ys - y0) / side
        half = 0.5 * u * side
        cx = x0 + side / 2
        return (u >= 0) & (u <= 1) & (np.abs(xs - cx) <= half)
    raise ConfigurationError(f"unknown shape {kind!r}")


def _tight_box(mask: np.ndarray):
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if rows.size == 0:
        return None
    return np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], dtype=np.float64)


def _overlaps(box: np.ndarray, others: list, limit: float) -> bool:
    for o in others:
        iw = min(box[2], o[2]) - max(box[0], o[0])
        ih = min(box[3], o[3]) - max(box[1], o[1])
        if iw <= 0 or ih <= 0:
            continue
        inter = iw * ih
        smaller = min((box[2] - box[0]) * (box[3] - box[1]), (o[2] - o[0]) * (o[3] - o[1]))
        if inter / smaller > limit:
            return True
    return False


def generate_scene(seed: int, index: int, num_classes: int, image_size=(128, 128),
                   min_side: float = 10.0, max_side: Optional[float] = None,
                   max_objects: int = 4, retries: int = 30, overlap_limit: float = 0.15) -> SyntheticScene:
    w, h = image_size
    rng = scene_rng(seed, index)
    max_side = max_side or 0.8 * min(w, h)
    img = _background(rng, h, w)
    n_obj = int(rng.integers(1, max_objects + 1))
    boxes, classes = [], []
    for _ in range(n_obj):
        cls = int(rng.integers(num_classes))
        kind, color = ARCHETYPES[cls]
        for _ in range(retries):
            side = math.exp(rng.uniform(math.log(min_side), math.log(max_side)))
            x0 = rng.uniform(0, w - side)
            y0 = rng.uniform(0, h - side)
            mask = _shape_mask(kind, h, w, x0, y0, side)
            box = _tight_box(mask)
            if box is None or _overlaps(box, boxes, overlap_limit):
                continue
            shade = np.clip(np.asarray(color) + rng.uniform(-0.05, 0.05, 3), 0, 1)
            img[:, mask] = shade[:, None] + rng.normal(0.0, 0.02, (3, int(mask.sum())))
            boxes.append(box)
            classes.append(cls)
            break
    img = np.clip(img, 0.0, 1.0)[None]
    return SyntheticScene(img, np.array(boxes).reshape(-1, 4), np.array(classes, dtype=np.int64),
                          f"{index:06d}.tensor")


def generate_synthetic_dataset(seed: int, n_images: int, num_classes: int,
                               image_size=(128, 128), **kwargs) -> list[SyntheticScene]:
    """Deterministic list of scenes with 1 to 4 shapes each.

    Scene ``i`` depends only on ``(seed, i)``, so prefixes of larger datasets
    are identical to smaller ones.
    """
    if not 1 <= num_classes <= len(ARCHETYPES):
        raise ConfigurationError(f"num_classes must be in [1, {len(ARCHETYPES)}], got {num_classes}")
    if n_images < 0:
        raise ConfigurationError("n_images must be >= 0")
    return [generate_scene(seed, i, num_classes, image_size, **kwargs) for i in range(n_images)]


def size_bucket(area: float) -> str:
    if area < SMALL_AREA:
        return "small"
    if area < LARGE_AREA:
        return "medium"
    return "large"


def size_histogram(scenes: Sequence[SyntheticScene]) -> dict:
    counts = {"small": 0, "medium": 0, "large": 0}
    for s in scenes:
        for b in s.boxes:
            counts[size_bucket((b[2] - b[0]) * (b[3] - b[1]))] += 1
    return counts


# -- disk format ------------------------------------------------------------------

def write_dataset(scenes: Sequence[SyntheticScene], out_dir, num_classes: int, seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in scenes:
        save_tensor(out / s.name, s.image)
        objects = [{"x1": float(b[0]), "y1": float(b[1]), "x2": float(b[2]), "y2": float(b[3]),
                    "class": int(c)} for b, c in zip(s.boxes, s.classes)]
        lines.append(json.dumps({"image": s.name, "width": s.width, "height": s.height,
                                 "objects": objects}, sort_keys=True))
    with open(out / "scenes.jsonl", "w") as fp:
        fp.write("".join(line + "\n" for line in lines))
    size = (scenes[0].width, scenes[0].height) if scenes else (0, 0)
    meta = {"num_classes": num_classes, "seed": seed, "count": len(scenes),
            "width": size[0], "height": size[1]}
    with open(out / "meta.json", "w") as fp:
        json.dump(meta, fp, sort_keys=True)
        fp.write("\n")
    return out


def read_meta(path) -> dict:
    with open(Path(path) / "meta.json") as fp:
        return json.load(fp)


def read_dataset(path, start: int = 0, stop: Optional[int] = None) -> list[SyntheticScene]:
    root = Path(path)
    with open(root / "scenes.jsonl") as fp:
        records = [json.loads(line) for line in fp if line.strip()]
    scenes = []
    for rec in records[start:stop]:
        objs = rec["objects"]
        boxes = np.array([[o["x1"], o["y1"], o["x2"], o["y2"]] for o in objs], dtype=np.float64).reshape(-1, 4)
        classes = np.array([o["class"] for o in objs], dtype=np.int64)
        scenes.append(SyntheticScene(load_tensor(root / rec["image"]), boxes, classes, rec["image"]))
    return scenes


# -- preprocessing ------------------------------------------------------------------

def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 1xCxHxW array with half-pixel-centre bilinear sampling."""
    _, c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    img = image[0]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy)[None]


def preprocess(image: np.ndarray, boxes=None, shorter_side: Optional[int] = 600, flip: bool = False):
    """Resize so the shorter side equals ``shorter_side``, optionally flip, and normalise.

    Returns (image Tensor, scaled boxes, scale factor).
    """
    _, _, h, w = image.shape
    scale = 1.0 if not shorter_side else shorter_side / min(h, w)
    nh, nw = int(round(h * scale)), int(round(w * scale))
    img = resize_bilinear(image, nh, nw) if (nh, nw) != (h, w) else image
    b = None if boxes is None else np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * scale
    if flip:
        img = img[:, :, :, ::-1]
        if b is not None:
            b = np.stack([nw - b[:, 2], b[:, 1], nw - b[:, 0], b[:, 3]], axis=1)
    return Tensor((img - PIXEL_MEAN) / PIXEL_STD), b, scale


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("GRCN_THREADS", "1")))
    except ValueError:
        return 1
