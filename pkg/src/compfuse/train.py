"""Three-stage training with per-stage freeze maps.

Stage 1 trains only the connectors (projector, compressor, fusion) with the
encoder and LLM frozen; stage 2 also unfreezes the LLM; stage 3 trains
everything. Each stage runs AdamW with linear warmup and cosine decay to
zero. The loss is token cross-entropy over answer positions only.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PipelineConfig, StageConfig, TrainConfig
from .data import KINDS, Sample, make_dataset
from .pipeline import ModelParams, init_params, prepare_image, text_and_decode, visual_prefix
from .tensor import Tensor
from .vision import encode

log = logging.getLogger(__name__)

STAGE_TASKS = {
    1: ("color-caption",),
    2: ("count-vqa", "position-vqa", "color-caption"),
    3: KINDS,
}
POOL_SIZE = 384
HELDOUT_SEED = 7919


class TrainingError(RuntimeError):
    pass


def lr_at(step: int, total: int, peak: float, warmup_ratio: float) -> float:
    """Linear warmup from 0 over ``ceil(warmup_ratio*total)`` steps, then cosine to 0."""
    warm = math.ceil(warmup_ratio * total)
    if step < warm:
        return peak * step / warm
    if total <= warm:
        return peak
    progress = min((step - warm) / (total - warm), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay (decay applies to matrices only)."""

    def __init__(self, tensors: dict[str, Tensor], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.tensors = tensors
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in tensors.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.tensors.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if p.ndim >= 2 and self.wd:
                update = update + self.wd * p.data
            p.data = p.data - lr * update


def sample_loss(params: ModelParams, sample: Sample, h_v=None) -> Tensor:
    grid = None if h_v is not None else prepare_image(sample.image, params.cfg)
    _, h_v2t, h_vc = visual_prefix(params, grid, h_v=h_v)
    *_, logits = text_and_decode(params, h_v2t, h_vc, sample.text_ids)
    offset = len(h_vc)
    return T.cross_entropy(logits, [offset + r for r in sample.target_rows], sample.target)


def evaluate(params: ModelParams, samples: Sequence[Sample]) -> tuple[float, float]:
    """(mean loss, teacher-forced token accuracy) over answer tokens."""
    losses, hits, total = [], 0, 0
    with T.no_grad():
        for s in samples:
            grid = prepare_image(s.image, params.cfg)
            _, h_v2t, h_vc = visual_prefix(params, grid)
            *_, logits = text_and_decode(params, h_v2t, h_vc, s.text_ids)
            rows = [len(h_vc) + r for r in s.target_rows]
            losses.append(float(T.cross_entropy(logits, rows, s.target).data))
            pred = np.argmax(logits.data[rows], axis=1)
            hits += int((pred == np.asarray(s.target)).sum())
            total += len(s.target)
    return float(np.mean(losses)), hits / max(total, 1)


@dataclass
class StageResult:
    stage: int
    trace: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.trace]


def train_stage(
    params: ModelParams,
    stage: StageConfig,
    samples: Sequence[Sample],
    steps: int | None = None,
    seed: int = 0,
) -> StageResult:
    """Run one stage in place on ``params``; frozen tensors are never touched."""
    steps = stage.steps if steps is None else steps
    params.set_frozen(stage.frozen)
    named = params.named()
    trainable = {k: t for k, t in named.items() if t.requires_grad}
    opt = AdamW(trainable, stage.betas, stage.eps, stage.weight_decay)
    rng = np.random.default_rng([seed, stage.stage])
    cache: dict[int, object] = {}
    cache_ok = "ve" in stage.frozen
    result = StageResult(stage.stage)
    batch = max(1, min(stage.batch_size, len(samples)))
    for step in range(steps):
        lr = lr_at(step, steps, stage.lr, stage.warmup_ratio)
        T.zero_grad(named.values())
        idx = rng.choice(len(samples), size=batch, replace=len(samples) < batch)
        total = 0.0
        for i in idx:
            i = int(i)
            h_v = None
            if cache_ok:
                if i not in cache:
                    with T.no_grad():
                        grid = prepare_image(samples[i].image, params.cfg)
                        cache[i] = encode(grid, params.ve, params.cfg)
                h_v = cache[i]
            loss = sample_loss(params, samples[i], h_v)
            T.backward(T.scale(loss, 1.0 / batch))
            total += float(loss.data)
        mean_loss = total / batch
        if not math.isfinite(mean_loss):
            raise TrainingError(f"stage {stage.stage}: non-finite loss {mean_loss} at step {step}")
        opt.step(lr)
        result.trace.append({"step": step, "stage": stage.stage, "lr": lr, "loss": mean_loss})
    T.zero_grad(named.values())
    return result


def write_trace(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "stage", "lr", "loss"])
        w.writeheader()
        for r in rows:
            w.writerow({"step": r["step"], "stage": r["stage"], "lr": repr(r["lr"]), "loss": repr(r["loss"])})


@dataclass
class CurriculumResult:
    params: ModelParams
    stages: list[StageResult]
    checkpoints: list[Path]


def run_curriculum(
    cfg: PipelineConfig,
    tcfg: TrainConfig,
    out_dir: str | Path,
    stages: Sequence[int] = (1, 2, 3),
    params: ModelParams | None = None,
) -> CurriculumResult:
    """Run the given stages in order, writing ``stage{k}.ckpt`` and ``trace.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = init_params(cfg, tcfg.seed) if params is None else params
    results, ckpts, rows = [], [], []
    for k in stages:
        stage = tcfg.stage(k)
        pool = make_dataset(STAGE_TASKS[k], POOL_SIZE, seed=tcfg.seed * 10 + k, size=tcfg.image_size)
        res = train_stage(params, stage, pool, seed=tcfg.seed)
        log.info("stage %d: loss %.4f -> %.4f", k, res.losses[0] if res.losses else float("nan"),
                 res.losses[-1] if res.losses else float("nan"))
        path = out / f"stage{k}.ckpt"
        save_checkpoint(path, params)
        results.append(res)
        ckpts.append(path)
        rows.extend(res.trace)
        write_trace(out / "trace.csv", rows)
    return CurriculumResult(params, results, ckpts)


def heldout_set(kind: str, n: int = 200, size: int = 64) -> list[Sample]:
    return make_dataset((kind,), n, seed=HELDOUT_SEED, size=size)


def reload(path: str | Path) -> ModelParams:
    return load_checkpoint(path)
