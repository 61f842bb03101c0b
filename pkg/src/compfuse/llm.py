"""Toy causal language model and its byte-level tokenizer."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import PipelineConfig
from .layers import BlockParams, attention_bias, block
from .tensor import Tensor
from .vision import TokenSequence

BOS, EOS, SEP = 256, 257, 258


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_text(ids: Sequence[int]) -> str:
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


def prompt_ids(text: str) -> list[int]:
    """``BOS text SEP`` -- the layout every prompt is fed in."""
    return [BOS, *encode_text(text), SEP]


@dataclass
class LlmParams:
    embedding: Tensor  # (vocab, d_t); also the (transposed) LM head
    pos: Tensor  # (max_positions, d_t)
    blocks: list[BlockParams]
    ln_g: Tensor
    ln_b: Tensor

    @classmethod
    def init(cls, cfg: PipelineConfig, rng: np.random.Generator) -> "LlmParams":
        d = cfg.d_t
        return cls(
            embedding=Tensor(rng.standard_normal((cfg.vocab_size, d)) / math.sqrt(d)),
            pos=Tensor(rng.standard_normal((cfg.max_positions, d)) * 0.02),
            blocks=[BlockParams.init(rng, d, cfg.mlp_ratio) for _ in range(cfg.llm_layers)],
            ln_g=Tensor(np.ones(d)),
            ln_b=Tensor(np.zeros(d)),
        )

    def named(self, prefix: str = "llm"):
        yield f"{prefix}.embedding", self.embedding
        yield f"{prefix}.pos", self.pos
        for i, b in enumerate(self.blocks):
            yield from b.named(f"{prefix}.blocks.{i}")
        yield f"{prefix}.ln_g", self.ln_g
        yield f"{prefix}.ln_b", self.ln_b


def embed_text(token_ids: Sequence[int], p: LlmParams) -> TokenSequence:
    ids = list(token_ids)
    v = p.embedding.shape[0]
    bad = [i for i in ids if not 0 <= i < v]
    if bad:
        raise ValueError(f"token ids out of range for vocab of {v}: {bad[:5]}")
    if not ids:
        return TokenSequence(Tensor(np.zeros((0, p.embedding.shape[1]))))
    return TokenSequence(T.take_rows(p.embedding, ids))


def decode(
    merged: Tensor,
    p: LlmParams,
    cfg: PipelineConfig,
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Causal decoder stack over the merged sequence -> logits for every row."""
    n = merged.shape[0]
    if n > p.pos.shape[0]:
        raise ValueError(f"sequence of {n} exceeds {p.pos.shape[0]} positions")
    h = T.add(merged, T.slice(p.pos, 0, 0, n))
    bias = attention_bias(key_mask, n, n, causal_from=0)
    for b in p.blocks:
        h = block(h, b, cfg.llm_heads, bias)
    h = T.layernorm(h, p.ln_g, p.ln_b)
    return T.matmul(h, T.transpose(p.embedding))
