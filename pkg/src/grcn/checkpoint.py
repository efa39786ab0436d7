"""Versioned binary checkpoint container.

Layout (little-endian)::

    b"GRCNCKPT"  u32 version  u32 header_bytes  header (UTF-8 JSON)
    tensor*      one record per name in header["parameters"] then header["velocity"],
                 each ``u32 rank, u32 dims[], f64 values[]``

The header carries the configuration snapshot, the iteration count and the
sampling state. All randomness during training is derived from
``(seed, iteration)``, so those two numbers are the complete RNG state.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig, parse_config
from .errors import ConfigurationError
from .tensor import read_tensor, write_tensor

MAGIC = b"GRCNCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    config: ExperimentConfig
    iteration: int
    parameters: dict
    velocity: dict
    rng_state: dict


def save_checkpoint(path, config: ExperimentConfig, iteration: int, parameters: dict, velocity: dict) -> None:
    names = sorted(parameters)
    header = {
        "config": config.to_text(include_location=False),
        "iteration": int(iteration),
        "rng": {"seed": int(config["train.seed"]), "next_iteration": int(iteration)},
        "parameters": names,
        "velocity": names,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    for name in names:
        write_tensor(buf, parameters[name])
    for name in names:
        write_tensor(buf, velocity[name])
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fp:
        if fp.read(len(MAGIC)) != MAGIC:
            raise ConfigurationError(f"{path}: not a checkpoint file")
        version, size = struct.unpack("<II", fp.read(8))
        if version != VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fp.read(size).decode())
        params = {name: read_tensor(fp) for name in header["parameters"]}
        velocity = {name: read_tensor(fp) for name in header["velocity"]}
    config = parse_config(header["config"])
    return Checkpoint(config, header["iteration"], params, velocity, header["rng"])


def restore_parameters(model, params: dict) -> None:
    if set(params) != set(model.parameters):
        missing = sorted(set(model.parameters) ^ set(params))[:5]
        raise ConfigurationError(f"checkpoint parameters do not match the model (e.g. {missing})")
    for name, arr in params.items():
        t = model.parameters[name]
        if t.data.shape != arr.shape:
            raise ConfigurationError(f"{name}: checkpoint shape {arr.shape} != model shape {t.data.shape}")
        t.data[...] = arr
