"""Compressed visual tokens + fusion for small vision-language pipelines.

A numpy reverse-mode tensor core, a toy patch encoder, projector, three
token compressors (conv2d, maxpool2d, mlp), three fusion modules (cross,
decoder, combined), a causal toy LLM, a multiply-add cost model and a
three-stage trainer.
"""

__version__ = "0.1.0"

from .config import ConfigError, PipelineConfig, TrainConfig, load_config, parse_config  # noqa: E402
from .pipeline import ModelParams, forward, forward_trace, generate, init_params  # noqa: E402
from .vision import ImageInput, TokenSequence  # noqa: E402

__all__ = [
    "ConfigError",
    "ImageInput",
    "ModelParams",
    "PipelineConfig",
    "TokenSequence",
    "TrainConfig",
    "forward",
    "forward_trace",
    "generate",
    "init_params",
    "load_config",
    "parse_config",
]
