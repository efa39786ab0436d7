"""Command-line entry point: ``grcn <gen-data|train|eval|infer|inspect-arch>``.

Failures print one line ``<CODE>: <message>`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, restore_parameters, save_checkpoint
from .config import ExperimentConfig, load_config
from .data import (default_threads, generate_synthetic_dataset, preprocess, read_dataset, read_meta,
                   size_histogram, write_dataset)
from .detector import BACKBONES, VARIANTS, branch_spec_for, build_model, describe, forward_detect
from .errors import ConfigurationError, GRCNError, NumericError
from .evaluation import DetectionRecord, EvalReport, GroundTruth, coco_metrics
from .tensor import load_tensor
from .training import init_velocity, scene_for_iteration, train_step

EXIT_CODES = {"E_CONFIG": 2, "E_IO": 3, "E_NUMERIC": 4}


def _parse_size(text: str) -> tuple:
    w, sep, h = text.lower().partition("x")
    try:
        size = (int(w), int(h)) if sep else (int(w), int(w))
    except ValueError:
        raise ConfigurationError(f"--size: expected WxH, got {text!r}") from None
    if min(size) < 8:
        raise ConfigurationError("--size: images must be at least 8x8")
    return size


# -- gen-data --------------------------------------------------------------------------

def cmd_gen_data(seed: int, n: int, classes: int, size: tuple, out_dir, echo=print) -> dict:
    scenes = generate_synthetic_dataset(seed, n, classes, size)
    try:
        write_dataset(scenes, out_dir, classes, seed)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out_dir}: {exc.strerror or exc}") from None
    hist = size_histogram(scenes)
    echo(f"scenes={n} objects={sum(hist.values())} small={hist['small']} "
         f"medium={hist['medium']} large={hist['large']}")
    return hist


# -- train ---------------------------------------------------------------------------------

def _log_line(iteration: int, loss: float, parts: dict, lr: float) -> str:
    return (f"iter={iteration} loss={loss:.6f} loss_rpn_cls={parts['rpn_cls']:.6f} "
            f"loss_rpn_reg={parts['rpn_reg']:.6f} loss_cls={parts['cls']:.6f} "
            f"loss_loc={parts['loc']:.6f} lr={lr:g}")


def parse_log(path) -> list[dict]:
    rows = []
    with open(path) as fp:
        for line in fp:
            if not line.startswith("iter="):
                continue
            fields = dict(tok.split("=", 1) for tok in line.split())
            rows.append({k: (int(v) if k == "iter" else float(v)) for k, v in fields.items()})
    return rows


def _train_scenes(cfg: ExperimentConfig):
    path = cfg["data.path"]
    if not path:
        raise ConfigurationError("data.path: required for training")
    meta = read_meta(path)
    if meta["num_classes"] != cfg["model.num_classes"]:
        raise ConfigurationError(f"model.num_classes: {cfg['model.num_classes']} but dataset has "
                                 f"{meta['num_classes']} classes")
    scenes = read_dataset(path, 0, cfg["data.train_scenes"] or None)
    if not scenes:
        raise ConfigurationError(f"data.path: no training scenes in {path}")
    return scenes


def cmd_train(cfg: ExperimentConfig, resume: Optional[str] = None, echo=print) -> Path:
    """Run the training loop; returns the path of the final checkpoint."""
    cfg.validate()
    out = Path(cfg["output.dir"])
    scenes = _train_scenes(cfg)
    model = cfg.build_model()
    velocity = init_velocity(model.parameters)
    start = 0
    if resume:
        ck = load_checkpoint(resume)
        if ck.config.to_text(False) != cfg.to_text(False):
            raise ConfigurationError(f"{resume}: checkpoint configuration differs from the requested one")
        restore_parameters(model, ck.parameters)
        for name, arr in ck.velocity.items():
            velocity[name][...] = arr
        start = ck.iteration
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config()
    total = cfg["train.iterations"]
    log_every, ck_every = cfg["train.log_every"], cfg["train.checkpoint_every"]
    recent: deque = deque(maxlen=16)
    mode = "a" if resume else "w"
    with open(out / "train_log.txt", mode) as log:
        for it in range(start, total):
            scene = scenes[scene_for_iteration(tcfg.seed, it, len(scenes))]
            recent.append(scene.name)
            try:
                step = train_step(model, scene, velocity, tcfg, it)
            except NumericError:
                dump = {"iteration": it + 1, "last_batch_ids": list(recent)}
                (out / "nan_dump.json").write_text(json.dumps(dump, indent=1) + "\n")
                raise NumericError(f"non-finite loss at iteration {it + 1}; "
                                   f"last batch ids written to {out / 'nan_dump.json'}") from None
            done = it + 1
            if done % log_every == 0 or done == total:
                line = _log_line(done, step.loss, step.parts, step.lr)
                log.write(line + "\n")
                log.flush()
                echo(line)
            if done % ck_every == 0 and done != total:
                save_checkpoint(out / f"ckpt_{done:07d}.bin", cfg, done, model.parameters, velocity)
    final = out / "final.bin"
    save_checkpoint(final, cfg, max(start, total), model.parameters, velocity)
    return final


# -- eval / infer -------------------------------------------------------------------------

def load_model(checkpoint):
    ck = load_checkpoint(checkpoint)
    model = ck.config.build_model()
    restore_parameters(model, ck.parameters)
    return ck.config, model


def _detect_scene(model, scene, shorter_side):
    image, _, scale = preprocess(scene.image, None, shorter_side)
    dets = forward_detect(model, image, "test")
    return dets.boxes / scale, dets.scores, dets.labels


def evaluate_scenes(model, scenes, shorter_side, interpolation="coco101", threads: int = 1) -> EvalReport:
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda s: _detect_scene(model, s, shorter_side), scenes))
    dets, gts = [], []
    for i, (scene, (boxes, scores, labels)) in enumerate(zip(scenes, results)):
        dets += [DetectionRecord(i, tuple(b), int(l), float(s)) for b, s, l in zip(boxes, scores, labels)]
        gts += [GroundTruth(i, tuple(map(float, b)), int(c)) for b, c in zip(scene.boxes, scene.classes)]
    return coco_metrics(dets, gts, model.num_classes, interpolation)


def _split_range(cfg: ExperimentConfig, split: str):
    n_train = cfg["data.train_scenes"]
    if split == "all" or (split == "holdout" and n_train == 0):
        return 0, None
    if split == "train":
        return 0, n_train or None
    return n_train, None


def cmd_eval(checkpoint, dataset: Optional[str], out_dir, split: str = "holdout", echo=print) -> EvalReport:
    cfg, model = load_model(checkpoint)
    path = dataset or cfg["data.path"]
    meta = read_meta(path)
    if meta["num_classes"] != model.num_classes:
        raise ConfigurationError(f"dataset has {meta['num_classes']} classes, checkpoint model has "
                                 f"{model.num_classes}")
    start, stop = _split_range(cfg, split)
    scenes = read_dataset(path, start, stop)
    report = evaluate_scenes(model, scenes, cfg["data.shorter_side"] or None,
                             cfg["eval.interpolation"], default_threads())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(report.to_json())
    echo(report.to_text().rstrip())
    return report


def cmd_infer(checkpoint, image_path, echo=print):
    cfg, model = load_model(checkpoint)
    arr = load_tensor(image_path)
    if arr.ndim == 3:
        arr = arr[None]
    from .data import SyntheticScene
    boxes, scores, labels = _detect_scene(model, SyntheticScene(arr, np.zeros((0, 4)), np.zeros(0)),
                                          cfg["data.shorter_side"] or None)
    for b, s, l in zip(boxes, scores, labels):
        echo(f"class={int(l)} score={s:.6f} x1={b[0]:.2f} y1={b[1]:.2f} x2={b[2]:.2f} y2={b[3]:.2f}")
    return boxes, scores, labels


def cmd_inspect_arch(variant: str, backbone: str, num_classes: int = 3, echo=print) -> str:
    try:
        branch_spec_for(variant, backbone)
    except ConfigurationError as exc:
        valid = []
        for b in BACKBONES:
            for v in VARIANTS:
                try:
                    branch_spec_for(v, b)
                    valid.append(f"{v}/{b}")
                except ConfigurationError:
                    pass
        raise ConfigurationError(f"{exc}; valid variant/backbone pairs: {', '.join(valid)}") from None
    text = describe(build_model(variant, backbone, num_classes))
    echo(text.rstrip())
    return text


# -- argument parsing ---------------------------------------------------------------------

def _config_with_overrides(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["train__seed"] = args.seed
    if args.out:
        updates["output__dir"] = args.out
    if args.dataset:
        updates["data__path"] = args.dataset
    if args.variant:
        updates["model__variant"] = args.variant
    if args.backbone:
        updates["model__backbone"] = args.backbone
    return cfg.replace(**updates) if updates else cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grcn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--size", default="128x128", help="image WxH")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--dataset")
    t.add_argument("--variant")
    t.add_argument("--backbone")
    t.add_argument("--checkpoint", help="resume from this checkpoint")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset")
    e.add_argument("--out", required=True)
    e.add_argument("--split", choices=("holdout", "train", "all"), default="holdout")

    i = sub.add_parser("infer", help="detect objects in one image tensor")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)

    a = sub.add_parser("inspect-arch", help="print an architecture table")
    a.add_argument("--variant", required=True)
    a.add_argument("--backbone", required=True)
    a.add_argument("--classes", type=int, default=3)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gen-data":
            cmd_gen_data(args.seed, args.n, args.classes, _parse_size(args.size), args.out)
        elif args.command == "train":
            cmd_train(_config_with_overrides(args), args.checkpoint)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.dataset, args.out, args.split)
        elif args.command == "infer":
            cmd_infer(args.checkpoint, args.image)
        elif args.command == "inspect-arch":
            cmd_inspect_arch(args.variant, args.backbone, args.classes)
    except GRCNError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.code, 1)
    except (OSError, EOFError) as exc:
        print(f"E_IO: {exc}", file=sys.stderr)
        return EXIT_CODES["E_IO"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
