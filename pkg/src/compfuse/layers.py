"""Building blocks shared by the stub encoder, the fusion decoder and the LLM."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def attention_bias(
    key_mask: np.ndarray | None,
    n_queries: int,
    n_keys: int,
    causal_from: int | None = None,
    query_offset: int = 0,
) -> np.ndarray | None:
    """Additive pre-softmax bias: 0 where attention is allowed, -inf elsewhere.

    ``key_mask`` hides keys whose entry is 0. ``causal_from`` enables causal
    masking among keys at index >= causal_from: query ``i`` (absolute position
    ``query_offset + i``) may not see such keys past its own position.
    """
    if key_mask is None and causal_from is None:
        return None
    bias = np.zeros((n_queries, n_keys))
    if key_mask is not None:
        key_mask = np.asarray(key_mask)
        if key_mask.shape != (n_keys,):
            raise ValueError(f"key mask length {key_mask.shape} != {n_keys} keys")
        bias[:, key_mask == 0] = -np.inf
    if causal_from is not None:
        q = query_offset + np.arange(n_queries)[:, None]
        k = np.arange(n_keys)[None, :]
        bias[(k >= causal_from) & (k > q)] = -np.inf
    return bias


def attend(q: Tensor, k: Tensor, v: Tensor, n_heads: int, bias: np.ndarray | None) -> Tensor:
    """Scaled dot-product attention over already-projected q/k/v.

    Each query row of the softmax is normalized over key positions.
    """
    d = q.shape[1]
    dh = d // n_heads
    s = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(n_heads):
        if n_heads == 1:
            qh, kh, vh = q, k, v
        else:
            qh, kh, vh = (T.slice(t, 1, h * dh, (h + 1) * dh) for t in (q, k, v))
        scores = T.scale(T.matmul(qh, T.transpose(kh)), s)
        if bias is not None:
            scores = T.add(scores, Tensor(bias))
        outs.append(T.matmul(T.softmax(scores, axis=1), vh))
    return outs[0] if n_heads == 1 else T.concat(outs, axis=1)


@dataclass
class BlockParams:
    """One pre-layernorm transformer block (bias-free attention, biased MLP)."""

    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, mlp_ratio: int, std: float | None = None):
        def w(n_in, n_out):
            sd = std if std is not None else 1.0 / math.sqrt(n_in)
            return Tensor(rng.standard_normal((n_in, n_out)) * sd)

        h = d * mlp_ratio
        return cls(
            ln1_g=Tensor(np.ones(d)),
            ln1_b=Tensor(np.zeros(d)),
            wq=w(d, d),
            wk=w(d, d),
            wv=w(d, d),
            wo=w(d, d),
            ln2_g=Tensor(np.ones(d)),
            ln2_b=Tensor(np.zeros(d)),
            w1=w(d, h),
            b1=Tensor(np.zeros(h)),
            w2=w(h, d),
            b2=Tensor(np.zeros(d)),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            yield f"{prefix}.{f.name}", getattr(self, f.name)

    def copy(self) -> "BlockParams":
        return BlockParams(*(Tensor(getattr(self, f.name).data) for f in fields(self)))


def mlp(x: Tensor, p: BlockParams) -> Tensor:
    return linear(T.gelu(linear(x, p.w1, p.b1)), p.w2, p.b2)


def block(
    x: Tensor,
    p: BlockParams,
    n_heads: int,
    bias: np.ndarray | None,
    query_start: int = 0,
) -> Tensor:
    """Pre-LN block. Keys/values come from every row of ``x``; only rows
    ``query_start:`` are computed and returned (rows are independent after
    attention, so this equals running all rows and slicing).
    """
    h = T.layernorm(x, p.ln1_g, p.ln1_b)
    n = x.shape[0]
    if query_start:
        hq = T.slice(h, 0, query_start, n)
        xq = T.slice(x, 0, query_start, n)
    else:
        hq, xq = h, x
    q = T.matmul(hq, p.wq)
    k = T.matmul(h, p.wk)
    v = T.matmul(h, p.wv)
    a = T.matmul(attend(q, k, v, n_heads, bias), p.wo)
    x1 = T.add(xq, a)
    return T.add(x1, mlp(T.layernorm(x1, p.ln2_g, p.ln2_b), p))
