"""End-to-end pipeline: image + text ids -> logits, and greedy generation.

Stage order::

    H_t   = embed(ids)
    H_v   = encode(patches)          (patch_budget rows, zero padded)
    H_v2t = project(H_v)
    H_vc  = compress(H_v2t)          (n_compressed rows)
    H_ft  = fuse(H_v2t, H_t)
    H_m   = [H_vc; H_ft]
    Y     = decode(H_m)              (causal)

The ``none`` compressor is the uncompressed baseline: the decoder gets all
``patch_budget`` projected tokens followed by the plain text embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import GROUPS, PipelineConfig
from .connectors import CompressorParams, ProjectorParams, compress, project
from .fusion import CrossParams, FusionParams, fuse
from .llm import EOS, LlmParams, decode, embed_text
from .tensor import Tensor
from .vision import EncoderParams, ImageInput, PatchGrid, TokenSequence, encode, fit_to_budget, patchify

STAGES = ("embed", "encode", "project", "compress", "fuse", "decode_prefill")


@dataclass
class ModelParams:
    cfg: PipelineConfig
    ve: EncoderParams
    proj: ProjectorParams
    comp: CompressorParams | None
    fuse: FusionParams | None
    llm: LlmParams

    def named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.ve.named("ve"))
        out.update(self.proj.named("proj"))
        if self.comp is not None:
            out.update(self.comp.named("comp"))
        if self.fuse is not None:
            out.update(self.fuse.named("fuse"))
        out.update(self.llm.named("llm"))
        return out

    def group(self, name: str) -> dict[str, Tensor]:
        if name not in GROUPS:
            raise KeyError(name)
        return {k: t for k, t in self.named().items() if k.split(".", 1)[0] == name}

    def set_frozen(self, frozen: set[str] | frozenset[str]) -> None:
        """Apply a freeze map: tensors of ``frozen`` groups stop requiring grad."""
        unknown = set(frozen) - set(GROUPS)
        if unknown:
            raise KeyError(f"unknown module groups {sorted(unknown)}")
        for name, t in self.named().items():
            t.requires_grad = name.split(".", 1)[0] not in frozen

    def param_counts(self) -> dict[str, int]:
        counts = {g: 0 for g in GROUPS}
        for name, t in self.named().items():
            counts[name.split(".", 1)[0]] += t.data.size
        return counts


def init_params(cfg: PipelineConfig, seed: int) -> ModelParams:
    """Fresh parameters for ``cfg``.

    Each module draws from its own child stream of ``seed``, so variants that
    share a module also share its initial weights. Connectors and the cross
    attention are normal with std 1 (``init_mode='unit'``) or 1/sqrt(fan_in);
    the fusion decoder block starts as a copy of LLM block 0.
    """
    cfg.validate()
    ve_rng, proj_rng, comp_rng, cross_rng, llm_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)
    )
    llm = LlmParams.init(cfg, llm_rng)
    comp = None if cfg.compressor == "none" else CompressorParams.init(cfg, comp_rng)
    fusion = None
    if cfg.fusion != "none":
        fusion = FusionParams(cfg.fusion)
        if cfg.fusion in ("cross", "combined"):
            fusion.cross = CrossParams.init(cfg.d_t, cross_rng, cfg.init_mode)
        if cfg.fusion in ("decoder", "combined"):
            fusion.decoder = llm.blocks[0].copy()
    params = ModelParams(
        cfg=cfg,
        ve=EncoderParams.init(cfg, ve_rng),
        proj=ProjectorParams.init(cfg, proj_rng),
        comp=comp,
        fuse=fusion,
        llm=llm,
    )
    params.set_frozen(frozenset())
    return params


@dataclass
class Trace:
    h_t: TokenSequence
    h_v: TokenSequence
    h_v2t: TokenSequence
    h_vc: TokenSequence
    h_ft: Tensor
    h_m: Tensor
    logits: Tensor
    flops: dict[str, int] = field(default_factory=dict)


def prepare_image(image: ImageInput | PatchGrid, cfg: PipelineConfig) -> PatchGrid:
    if isinstance(image, PatchGrid):
        return image
    fitted = fit_to_budget(image, cfg.patch_size, cfg.patch_budget)
    return patchify(fitted, cfg.patch_size)


class _StageMeter:
    def __init__(self):
        self.counter = T.flop_counter()
        self.mark = self.counter.mul_adds
        self.flops: dict[str, int] = {}

    def close(self, stage: str) -> None:
        now = self.counter.mul_adds
        self.flops[stage] = now - self.mark
        self.mark = now


def visual_prefix(params: ModelParams, grid: PatchGrid | None, pad_values=None, meter=None, h_v=None):
    """encode -> project -> compress. A precomputed ``h_v`` skips the encoder."""
    cfg = params.cfg
    if h_v is None:
        h_v = encode(grid, params.ve, cfg, pad_values)
    if meter:
        meter.close("encode")
    h_v2t = project(h_v, params.proj)
    if meter:
        meter.close("project")
    h_vc = h_v2t if params.comp is None else compress(h_v2t, params.comp, cfg)
    if meter:
        meter.close("compress")
    return h_v, h_v2t, h_vc


def text_and_decode(params: ModelParams, h_v2t, h_vc, token_ids, meter=None):
    cfg = params.cfg
    h_t = embed_text(token_ids, params.llm)
    if meter:
        meter.close("embed")
    h_ft = h_t.tokens if params.fuse is None else fuse(h_v2t, h_t, params.fuse, cfg)
    if meter:
        meter.close("fuse")
    h_m = T.concat([h_vc.tokens, h_ft], axis=0)
    key_mask = None
    if params.comp is None:
        key_mask = np.concatenate([h_vc.mask, np.ones(len(h_t), dtype=np.int64)])
    logits = decode(h_m, params.llm, cfg, key_mask)
    if meter:
        meter.close("decode_prefill")
    return h_t, h_ft, h_m, logits


def forward_trace(
    params: ModelParams,
    image: ImageInput | PatchGrid,
    token_ids: Sequence[int],
    pad_values: np.ndarray | None = None,
) -> Trace:
    """Run every stage, keeping intermediates and per-stage multiply-adds."""
    if len(token_ids) > params.cfg.max_text:
        raise ValueError(f"{len(token_ids)} text tokens exceed max_text={params.cfg.max_text}")
    grid = prepare_image(image, params.cfg)
    meter = _StageMeter()
    h_v, h_v2t, h_vc = visual_prefix(params, grid, pad_values, meter)
    h_t, h_ft, h_m, logits = text_and_decode(params, h_v2t, h_vc, token_ids, meter)
    flops = {s: meter.flops.get(s, 0) for s in STAGES}
    return Trace(h_t, h_v, h_v2t, h_vc, h_ft, h_m, logits, flops)


def forward(params: ModelParams, image, token_ids: Sequence[int], pad_values=None) -> Tensor:
    """Logits of shape (n_prefix + len(token_ids), vocab)."""
    return forward_trace(params, image, token_ids, pad_values).logits


def generate(
    params: ModelParams,
    image: ImageInput | PatchGrid,
    prompt: Sequence[int],
    max_steps: int | None = None,
    eos: int = EOS,
) -> list[int]:
    """Greedy continuation of ``prompt``; the emitted EOS (if any) is included.

    The visual prefix is computed once. Each step re-runs fusion and the
    decoder over the current text (there is no KV cache).
    """
    cfg = params.cfg
    max_steps = cfg.max_decode_steps if max_steps is None else max_steps
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    ids = list(prompt)
    out: list[int] = []
    with T.no_grad():
        _, h_v2t, h_vc = visual_prefix(params, prepare_image(image, cfg))
        for _ in range(max_steps):
            if len(ids) >= cfg.max_text:
                break
            *_, logits = text_and_decode(params, h_v2t, h_vc, ids)
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            ids.append(nxt)
            if nxt == eos:
                break
    return out
