"""Pipeline and training configuration, plus the flat key-value config file.

The file format is one ``key = value`` per line; ``#`` starts a comment and
blank lines are ignored. Every key must be a field of :class:`PipelineConfig`
or :class:`TrainConfig`; unknown keys are rejected. Example::

    # toy pipeline
    d_t = 64
    fusion = combined
    stage1_lr = 1e-3
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

COMPRESSORS = ("conv2d", "maxpool2d", "mlp", "none")
FUSIONS = ("none", "cross", "decoder", "combined")
INIT_MODES = ("stabilized", "unit")
TEXT_ATTENTION = ("causal", "full")


class ConfigError(ValueError):
    """A config value or key is invalid. ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class PipelineConfig:
    d_v: int = 64
    d_t: int = 64
    patch_size: int = 16
    patch_budget: int = 256
    n_compressed: int = 64
    vocab_size: int = 259
    llm_layers: int = 2
    ve_layers: int = 2
    llm_heads: int = 1
    ve_heads: int = 1
    fusion_heads: int = 1
    mlp_ratio: int = 4
    max_text: int = 64
    max_decode_steps: int = 32
    compressor: str = "mlp"
    fusion: str = "combined"
    fusion_mask_visual: bool = True
    fusion_text_attention: str = "causal"
    init_mode: str = "stabilized"

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def grid_side(self) -> int:
        """Side of the square token grid the spatial compressors see."""
        return math.isqrt(self.patch_budget)

    @property
    def pool_window(self) -> int:
        return self.grid_side // math.isqrt(self.n_compressed)

    @property
    def n_prefix(self) -> int:
        """Visual tokens the decoder sees."""
        return self.patch_budget if self.compressor == "none" else self.n_compressed

    @property
    def max_positions(self) -> int:
        return self.patch_budget + self.max_text

    def validate(self) -> "PipelineConfig":
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and (not isinstance(v, int) or v <= 0):
                raise ConfigError(f.name, f"must be a positive integer, got {v!r}")
        for name, allowed in (
            ("compressor", COMPRESSORS),
            ("fusion", FUSIONS),
            ("init_mode", INIT_MODES),
            ("fusion_text_attention", TEXT_ATTENTION),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(name, f"must be one of {allowed}, got {getattr(self, name)!r}")
        if self.n_compressed >= self.patch_budget:
            raise ConfigError("n_compressed", "must be smaller than patch_budget")
        if self.compressor in ("conv2d", "maxpool2d"):
            g, c = self.grid_side, math.isqrt(self.n_compressed)
            if g * g != self.patch_budget or c * c != self.n_compressed or g % c:
                raise ConfigError(
                    "n_compressed",
                    "spatial compressors need square token grids with an integer window",
                )
        if self.compressor == "none" and self.fusion != "none":
            raise ConfigError("fusion", "the uncompressed baseline has no fusion module")
        for width, heads, name in (
            (self.d_t, self.llm_heads, "llm_heads"),
            (self.d_v, self.ve_heads, "ve_heads"),
            (self.d_t, self.fusion_heads, "fusion_heads"),
        ):
            if width % heads:
                raise ConfigError(name, f"must divide the model width {width}")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size", "needs room for special tokens")
        return self

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes).validate()


@dataclass
class StageConfig:
    stage: int
    frozen: frozenset[str]
    steps: int
    batch_size: int
    lr: float
    warmup_ratio: float = 0.03
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


# Which module groups are frozen in each stage.
FREEZE_SCHEDULE = {
    1: frozenset({"ve", "llm"}),
    2: frozenset({"ve"}),
    3: frozenset(),
}

GROUPS = ("ve", "proj", "comp", "fuse", "llm")


@dataclass
class TrainConfig:
    seed: int = 0
    stage1_steps: int = 300
    stage2_steps: int = 300
    stage3_steps: int = 200
    stage1_batch: int = 8
    stage2_batch: int = 8
    stage3_batch: int = 8
    # 1e-3 / 2e-5 / 1e-6 keeps decreasing order but is too timid at this scale
    stage1_lr: float = 3e-3
    stage2_lr: float = 1e-3
    stage3_lr: float = 3e-4
    warmup_ratio: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    image_size: int = 64

    def stage(self, k: int) -> StageConfig:
        if k not in FREEZE_SCHEDULE:
            raise ConfigError("stage", f"must be 1, 2 or 3, got {k}")
        return StageConfig(
            stage=k,
            frozen=FREEZE_SCHEDULE[k],
            steps=getattr(self, f"stage{k}_steps"),
            batch_size=getattr(self, f"stage{k}_batch"),
            lr=getattr(self, f"stage{k}_lr"),
            warmup_ratio=self.warmup_ratio,
            betas=(self.beta1, self.beta2),
            eps=self.adam_eps,
            weight_decay=self.weight_decay,
        )

    def validate(self) -> "TrainConfig":
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "seed":
                continue
            if v < 0:
                raise ConfigError(f.name, f"must be non-negative, got {v!r}")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError("warmup_ratio", "must lie in [0, 1)")
        return self


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _coerce(name: str, ftype, raw: str):
    t = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    try:
        if t == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {t}") from None


def parse_config(text: str) -> RunConfig:
    pipe_fields = {f.name: f for f in fields(PipelineConfig)}
    train_fields = {f.name: f for f in fields(TrainConfig)}
    pipe: dict = {}
    train: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in pipe_fields:
            pipe[key] = _coerce(key, pipe_fields[key].type, raw)
        elif key in train_fields:
            train[key] = _coerce(key, train_fields[key].type, raw)
        else:
            raise ConfigError(key, "unknown config key")
    return RunConfig(PipelineConfig(**pipe).validate(), TrainConfig(**train).validate())


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig(PipelineConfig().validate(), TrainConfig().validate())
    return parse_config(Path(path).read_text())


def dump_config(cfg: PipelineConfig) -> str:
    """Serialize a pipeline config to the key-value format (stable key order)."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
