"""Fusing uncompressed visual tokens into the text tokens.

Three variants:

* ``cross``    -- text queries attend over the projected visual tokens.
* ``decoder``  -- one pre-LN transformer block over ``[visual; text]``,
  keeping only the text rows of its output.
* ``combined`` -- the sum of the two, each with its own weights.

Softmax always normalizes over key positions. Padded visual keys are hidden
unless ``mask_visual`` is off. In the decoder variant text tokens see every
visual token; among themselves they attend causally by default so that a
text position never reads tokens it is trained to predict
(``causal_text=False`` gives full text-to-text attention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import PipelineConfig
from .layers import BlockParams, attend, attention_bias, block
from .tensor import Tensor
from .vision import TokenSequence


@dataclass
class CrossParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, mode: str = "stabilized") -> "CrossParams":
        sd = 1.0 if mode == "unit" else 1.0 / np.sqrt(d)
        return cls(*(Tensor(rng.standard_normal((d, d)) * sd) for _ in range(3)))

    def named(self, prefix: str):
        for name in ("wq", "wk", "wv"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class FusionParams:
    variant: str
    cross: CrossParams | None = None
    decoder: BlockParams | None = None

    def named(self, prefix: str = "fuse"):
        if self.cross is not None:
            yield from self.cross.named(f"{prefix}.cross")
        if self.decoder is not None:
            yield from self.decoder.named(f"{prefix}.decoder")


def _empty(ht: TokenSequence) -> Tensor:
    return Tensor(np.zeros((0, ht.tokens.shape[1])))


def fuse_cross(
    hv2t: TokenSequence,
    ht: TokenSequence,
    p: CrossParams,
    n_heads: int = 1,
    mask_visual: bool = True,
) -> Tensor:
    if hv2t.tokens.shape[1] != ht.tokens.shape[1]:
        raise T.ShapeError("fuse_cross", hv2t.tokens.shape, ht.tokens.shape)
    n_t, n_v = len(ht), len(hv2t)
    if n_t == 0:
        return _empty(ht)
    q = T.matmul(ht.tokens, p.wq)
    k = T.matmul(hv2t.tokens, p.wk)
    v = T.matmul(hv2t.tokens, p.wv)
    bias = attention_bias(hv2t.mask if mask_visual else None, n_t, n_v)
    return attend(q, k, v, n_heads, bias)


def fuse_decoder(
    hv2t: TokenSequence,
    ht: TokenSequence,
    p: BlockParams,
    n_heads: int = 1,
    mask_visual: bool = True,
    causal_text: bool = True,
) -> Tensor:
    if hv2t.tokens.shape[1] != ht.tokens.shape[1]:
        raise T.ShapeError("fuse_decoder", hv2t.tokens.shape, ht.tokens.shape)
    n_t, n_v = len(ht), len(hv2t)
    if n_t == 0:
        return _empty(ht)
    cat = T.concat([hv2t.tokens, ht.tokens], axis=0)
    key_mask = None
    if mask_visual:
        key_mask = np.concatenate([hv2t.mask, np.ones(n_t, dtype=np.int64)])
    bias = attention_bias(
        key_mask,
        n_t,
        n_v + n_t,
        causal_from=n_v if causal_text else None,
        query_offset=n_v,
    )
    return block(cat, p, n_heads, bias, query_start=n_v)


def fuse(hv2t: TokenSequence, ht: TokenSequence, p: FusionParams, cfg: PipelineConfig) -> Tensor:
    kw = dict(n_heads=cfg.fusion_heads, mask_visual=cfg.fusion_mask_visual)
    causal = cfg.fusion_text_attention == "causal"
    if p.variant in ("cross", "combined") and p.cross is None:
        raise ValueError(f"fusion variant {p.variant!r} is missing its cross-attention weights")
    if p.variant in ("decoder", "combined") and p.decoder is None:
        raise ValueError(f"fusion variant {p.variant!r} is missing its decoder block")
    if p.variant == "cross":
        return fuse_cross(hv2t, ht, p.cross, **kw)
    if p.variant == "decoder":
        return fuse_decoder(hv2t, ht, p.decoder, causal_text=causal, **kw)
    if p.variant == "combined":
        return T.add(
            fuse_cross(hv2t, ht, p.cross, **kw),
            fuse_decoder(hv2t, ht, p.decoder, causal_text=causal, **kw),
        )
    raise ValueError(f"unknown fusion variant {p.variant!r}")
