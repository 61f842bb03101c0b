"""Visual-to-text projector and the three token compressors.

The spatial compressors (conv2d, maxpool2d) view the ``patch_budget`` tokens
as a square grid in row-major token order and slide a non-overlapping
``w x w`` window (w = 2 for 256 -> 64), emitting the pooled grid row-major.
The MLP compressor instead mixes along the token axis with one
``n_compressed x patch_budget`` matrix shared by every channel; a per-channel
mixer would cost ``D_t`` times the parameters. Its bias is per channel: a
per-output-token bias would add the same constant to every channel of a row,
which the decoder's layernorms erase, so it could never receive gradient.

Padded tokens are compressed as they are (they are zero after projection).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import PipelineConfig
from .layers import linear
from .tensor import Tensor
from .vision import TokenSequence


def _normal(rng: np.random.Generator, shape, fan_in: int, mode: str) -> Tensor:
    sd = 1.0 if mode == "unit" else 1.0 / math.sqrt(fan_in)
    return Tensor(rng.standard_normal(shape) * sd)


@dataclass
class ProjectorParams:
    w1: Tensor  # (d_v, d_t)
    b1: Tensor
    w2: Tensor  # (d_t, d_t)
    b2: Tensor

    @classmethod
    def init(cls, cfg: PipelineConfig, rng: np.random.Generator) -> "ProjectorParams":
        return cls(
            w1=_normal(rng, (cfg.d_v, cfg.d_t), cfg.d_v, cfg.init_mode),
            b1=Tensor(np.zeros(cfg.d_t)),
            w2=_normal(rng, (cfg.d_t, cfg.d_t), cfg.d_t, cfg.init_mode),
            b2=Tensor(np.zeros(cfg.d_t)),
        )

    def named(self, prefix: str = "proj"):
        for name in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{name}", getattr(self, name)


def project(hv: TokenSequence, p: ProjectorParams) -> TokenSequence:
    """Two-layer GELU MLP applied token by token; padded rows are re-zeroed."""
    if hv.tokens.shape[1] != p.w1.shape[0]:
        raise T.ShapeError("project", hv.tokens.shape, p.w1.shape)
    h = linear(T.gelu(linear(hv.tokens, p.w1, p.b1)), p.w2, p.b2)
    return TokenSequence(T.keep(h, hv.mask[:, None] > 0), hv.mask.copy())


@dataclass
class CompressorParams:
    variant: str
    kernel: Tensor | None = None  # conv2d: (w, w, d_t, d_t)
    bias: Tensor | None = None  # (d_t,) for conv2d and mlp
    mixer: Tensor | None = None  # mlp: (n_compressed, patch_budget)

    @classmethod
    def init(cls, cfg: PipelineConfig, rng: np.random.Generator) -> "CompressorParams":
        v, d, mode = cfg.compressor, cfg.d_t, cfg.init_mode
        if v == "conv2d":
            w = cfg.pool_window
            return cls(v, kernel=_normal(rng, (w, w, d, d), w * w * d, mode), bias=Tensor(np.zeros(d)))
        if v == "mlp":
            n_c, n_v = cfg.n_compressed, cfg.patch_budget
            return cls(v, mixer=_normal(rng, (n_c, n_v), n_v, mode), bias=Tensor(np.zeros(d)))
        if v == "maxpool2d":
            return cls(v)
        raise ValueError(f"no compressor parameters for variant {v!r}")

    def named(self, prefix: str = "comp"):
        for name in ("kernel", "mixer", "bias"):
            t = getattr(self, name)
            if t is not None:
                yield f"{prefix}.{name}", t


def window_taps(grid_side: int, window: int) -> list[np.ndarray]:
    """Token indices for each window tap, in row-major tap order.

    ``taps[t][j]`` is the flat token index that tap ``t`` = (dy, dx) of output
    cell ``j`` reads.
    """
    out_side = grid_side // window
    oy, ox = np.divmod(np.arange(out_side * out_side), out_side)
    return [
        (oy * window + dy) * grid_side + (ox * window + dx)
        for dy in range(window)
        for dx in range(window)
    ]


def compress(hv2t: TokenSequence, c: CompressorParams, cfg: PipelineConfig) -> TokenSequence:
    x = hv2t.tokens
    if x.shape[0] != cfg.patch_budget:
        raise ValueError(f"compress expects {cfg.patch_budget} tokens, got {x.shape[0]}")
    d = x.shape[1]
    if c.variant == "mlp":
        out = T.add(T.matmul(c.mixer, x), c.bias)
    elif c.variant in ("conv2d", "maxpool2d"):
        w = cfg.pool_window
        taps = [T.take_rows(x, idx) for idx in window_taps(cfg.grid_side, w)]
        if c.variant == "maxpool2d":
            out = T.maximum(taps)
        else:
            patches = T.concat(taps, axis=1)  # (n_c, w*w*d), tap-major like the kernel
            out = T.add(T.matmul(patches, T.reshape(c.kernel, (w * w * d, d))), c.bias)
    else:
        raise ValueError(f"unknown compressor {c.variant!r}")
    return TokenSequence(out)
