"""Closed-form multiply-add and parameter counts for every pipeline variant.

Unit: one multiply-add (MAC) of a matmul. Elementwise work is not counted,
matching the tensor engine's counter, so ``analytic_flops`` must equal the
per-stage counts measured by ``measured_flops`` exactly.

Per-step decode figures cover the LLM only: ``decode_step_kv`` is one new
token against a cached context, ``decode_step_nokv`` is a full re-prefill at
the longer length.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import PipelineConfig
from .vision import ImageInput

STAGE_KEYS = ("encode", "project", "compress", "fuse", "decode_prefill")
VARIANTS = ("baseline", "compress", "cross", "decoder", "combined")
CSV_COLUMNS = (
    "variant",
    "n_text",
    *STAGE_KEYS,
    "total",
    "decode_step_kv",
    "decode_step_nokv",
    "params",
    "total_ratio",
    "decode_ratio",
)


@dataclass
class FlopsReport:
    variant: str
    n_text: int
    stages: dict[str, int]
    params: dict[str, int] = field(default_factory=dict)
    decode_step_kv: int | None = None
    decode_step_nokv: int | None = None

    @property
    def total(self) -> int:
        return sum(self.stages.values())

    @property
    def total_params(self) -> int:
        return sum(self.params.values())


def _block_macs(n_q: int, n_k: int, d: int, mlp_ratio: int) -> int:
    qo = 2 * n_q * d * d
    kv = 2 * n_k * d * d
    attn = 2 * n_q * n_k * d
    ffn = 2 * n_q * d * (mlp_ratio * d)
    return qo + kv + attn + ffn


def _block_params(d: int, mlp_ratio: int) -> int:
    h = mlp_ratio * d
    return 4 * d * d + 2 * d * h + h + d + 4 * d


def variant_config(cfg: PipelineConfig, variant: str) -> PipelineConfig:
    """The config of one comparison variant, sharing all other dims with ``cfg``."""
    comp = cfg.compressor if cfg.compressor != "none" else "mlp"
    if variant == "baseline":
        return cfg.replace(compressor="none", fusion="none")
    if variant == "compress":
        return cfg.replace(compressor=comp, fusion="none")
    if variant in ("cross", "decoder", "combined"):
        return cfg.replace(compressor=comp, fusion=variant)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def variant_name(cfg: PipelineConfig) -> str:
    if cfg.compressor == "none":
        return "baseline"
    return "compress" if cfg.fusion == "none" else cfg.fusion


def analytic_params(cfg: PipelineConfig) -> dict[str, int]:
    n, dv, dt, r = cfg.patch_budget, cfg.d_v, cfg.d_t, cfg.mlp_ratio
    ve = cfg.patch_dim * dv + dv + 2 * n * dv + cfg.ve_layers * _block_params(dv, r) + 2 * dv
    proj = dv * dt + dt + dt * dt + dt
    comp = {
        "conv2d": cfg.pool_window**2 * dt * dt + dt,
        "mlp": cfg.n_compressed * n + dt,
    }.get(cfg.compressor, 0)
    fuse = 0
    if cfg.fusion in ("cross", "combined"):
        fuse += 3 * dt * dt
    if cfg.fusion in ("decoder", "combined"):
        fuse += _block_params(dt, r)
    llm = cfg.vocab_size * dt + cfg.max_positions * dt + cfg.llm_layers * _block_params(dt, r) + 2 * dt
    return {"ve": ve, "proj": proj, "comp": comp, "fuse": fuse, "llm": llm}


def analytic_flops(cfg: PipelineConfig, n_text: int) -> FlopsReport:
    cfg.validate()
    if n_text < 0:
        raise ValueError("n_text must be non-negative")
    n, dv, dt, r = cfg.patch_budget, cfg.d_v, cfg.d_t, cfg.mlp_ratio
    encode = n * cfg.patch_dim * dv + cfg.ve_layers * _block_macs(n, n, dv, r)
    project = n * dv * dt + n * dt * dt
    compress = {
        "conv2d": cfg.n_compressed * cfg.pool_window**2 * dt * dt,
        "mlp": cfg.n_compressed * n * dt,
    }.get(cfg.compressor, 0)
    fuse = 0
    if n_text and cfg.fusion in ("cross", "combined"):
        fuse += n_text * dt * dt + 2 * n * dt * dt + 2 * n_text * n * dt
    if n_text and cfg.fusion in ("decoder", "combined"):
        fuse += _block_macs(n_text, n + n_text, dt, r)
    seq = cfg.n_prefix + n_text
    head = dt * cfg.vocab_size
    prefill = cfg.llm_layers * _block_macs(seq, seq, dt, r) + seq * head
    step_kv = cfg.llm_layers * _block_macs(1, seq + 1, dt, r) + head
    step_nokv = cfg.llm_layers * _block_macs(seq + 1, seq + 1, dt, r) + (seq + 1) * head
    return FlopsReport(
        variant=variant_name(cfg),
        n_text=n_text,
        stages=dict(zip(STAGE_KEYS, (encode, project, compress, fuse, prefill))),
        params=analytic_params(cfg),
        decode_step_kv=step_kv,
        decode_step_nokv=step_nokv,
    )


def reference_image(seed: int = 0) -> ImageInput:
    """A 640x480 noise image (over budget, so it exercises resizing)."""
    return ImageInput(np.random.default_rng(seed).random((480, 640, 3)))


def measured_flops(cfg: PipelineConfig, n_text: int, seed: int = 0, image: ImageInput | None = None) -> FlopsReport:
    """Count multiply-adds of one real forward pass, stage by stage."""
    from .pipeline import forward_trace, init_params

    params = init_params(cfg, seed)
    ids = np.random.default_rng(seed).integers(0, 256, size=n_text).tolist()
    T.flop_counter().reset()
    with T.no_grad():
        tr = forward_trace(params, image if image is not None else reference_image(seed), ids)
    return FlopsReport(
        variant=variant_name(cfg),
        n_text=n_text,
        stages={k: tr.flops[k] for k in STAGE_KEYS},
        params=params.param_counts(),
    )


def compare_variants(cfg: PipelineConfig, n_text: int, measured: bool = False) -> list[FlopsReport]:
    fn = measured_flops if measured else analytic_flops
    return [fn(variant_config(cfg, v), n_text) for v in VARIANTS]


def _rows(reports: list[FlopsReport]):
    base = next((r for r in reports if r.variant == "baseline"), None)
    for r in reports:
        tr = r.total / base.total if base else float("nan")
        dr = r.stages["decode_prefill"] / base.stages["decode_prefill"] if base else float("nan")
        yield [
            r.variant,
            r.n_text,
            *(r.stages[k] for k in STAGE_KEYS),
            r.total,
            "" if r.decode_step_kv is None else r.decode_step_kv,
            "" if r.decode_step_nokv is None else r.decode_step_nokv,
            r.total_params,
            f"{tr:.4f}",
            f"{dr:.4f}",
        ]


def to_csv(reports: list[FlopsReport]) -> str:
    import csv

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(_rows(reports))
    return buf.getvalue()


def to_table(reports: list[FlopsReport]) -> str:
    """Aligned text table; counts are multiply-adds."""
    rows = [[str(c) for c in row] for row in _rows(reports)]
    header = list(CSV_COLUMNS)
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
    fmt = lambda cells: "  ".join(  # noqa: E731
        c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))
    )
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines) + "\n"
