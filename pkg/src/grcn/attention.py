"""Global-context attention for ROI features.

Each ROI-pooled proposal contributes ``q`` query vectors (one per spatial
cell); the whole-image feature map pooled to a fixed grid supplies ``m``
context vectors that serve as both keys and values. The update is

    P <- P + softmax((P W_P^T)(V W_K^T)^T / sqrt(k)) V'

with ``V' = V W_V^T`` when a value projection is kept, else ``V``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DimensionError
from .functional import softmax_rows
from .tensor import Tensor, as_tensor, concat, matmul, transpose


@dataclass
class AttentionWeights:
    w_p: Tensor
    w_k: Tensor
    w_v: Optional[Tensor] = None
    num_heads: int = 1

    @property
    def dim(self) -> int:
        return self.w_p.shape[0]

    @property
    def key_dim(self) -> int:
        return self.dim // self.num_heads

    def tensors(self) -> list[Tensor]:
        return [t for t in (self.w_p, self.w_k, self.w_v) if t is not None]


def init_attention(dim: int, rng: np.random.Generator, keep_value_proj: bool = False,
                   num_heads: int = 1) -> AttentionWeights:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) initialisation for every projection."""
    if num_heads < 1 or dim % num_heads:
        raise ConfigurationError(f"channel dim {dim} is not divisible by num_heads={num_heads}")
    bound = 1.0 / math.sqrt(dim)

    def mat():
        return Tensor(rng.uniform(-bound, bound, (dim, dim)), requires_grad=True)

    w_p, w_k = mat(), mat()
    w_v = mat() if keep_value_proj else None
    return AttentionWeights(w_p, w_k, w_v, num_heads)


def attention_map(P: Tensor, V: Tensor, w: AttentionWeights) -> list[Tensor]:
    """Per-head attention matrices, each of shape (..., q, m)."""
    return _attend(P, V, w)[1]


def global_context_attend(P: Tensor, V: Tensor, w: AttentionWeights) -> Tensor:
    """Residual context update of query set ``P`` (..., q, d) from context ``V`` (m, d)."""
    return _attend(P, V, w)[0]


def _attend(P, V, w: AttentionWeights):
    P, V = as_tensor(P), as_tensor(V)
    d = w.dim
    if w.num_heads < 1 or d % w.num_heads:
        raise ConfigurationError(f"channel dim {d} is not divisible by num_heads={w.num_heads}")
    for name, t in (("W_P", w.w_p), ("W_K", w.w_k), ("W_V", w.w_v)):
        if t is not None and t.shape != (d, d):
            raise DimensionError(f"{name} must be {d}x{d}, got {t.shape}")
    if P.shape[-1] != d or V.shape[-1] != d:
        raise DimensionError(f"query dim {P.shape[-1]} and context dim {V.shape[-1]} must equal {d}")
    if V.ndim != 2:
        raise DimensionError(f"context set must be (m, d), got {V.shape}")

    q = matmul(P, transpose(w.w_p))  # ..., q, d
    k = matmul(V, transpose(w.w_k))  # m, d
    v = matmul(V, transpose(w.w_v)) if w.w_v is not None else V
    h = w.num_heads
    dh = d // h
    scale = 1.0 / math.sqrt(dh)
    maps, outs = [], []
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        qi = q[..., sl] if h > 1 else q
        ki = k[:, sl] if h > 1 else k
        vi = v[:, sl] if h > 1 else v
        a = softmax_rows(matmul(qi, transpose(ki)) * scale)
        maps.append(a)
        outs.append(matmul(a, vi))
    ctx = outs[0] if h == 1 else concat(outs, axis=-1)
    return P + ctx, maps
