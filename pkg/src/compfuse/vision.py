"""Image ingestion, budgeted resizing, patching and the stub vision encoder.

Patch vectors are laid out as ``pixels[16r:16r+16, 16c:16c+16, :]`` flattened
in (row, column, channel) order, i.e. channel-interleaved RGB.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import PipelineConfig
from .layers import BlockParams, attention_bias, block
from .tensor import Tensor


@dataclass
class ImageInput:
    pixels: np.ndarray  # (height, width, 3), values in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"expected a non-empty (H, W, 3) image, got shape {px.shape}")
        self.pixels = np.clip(px, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class PatchGrid:
    rows: int
    cols: int
    patch_size: int
    patches: np.ndarray  # (rows * cols, patch_size**2 * 3)

    @property
    def count(self) -> int:
        return self.rows * self.cols


@dataclass
class TokenSequence:
    tokens: Tensor
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mask is None:
            self.mask = np.ones(self.tokens.shape[0], dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.int64)
        if self.mask.shape != (self.tokens.shape[0],):
            raise ValueError("mask length must equal the token count")

    @property
    def valid_count(self) -> int:
        return int(self.mask.sum())

    def __len__(self) -> int:
        return self.tokens.shape[0]


# ------------------------------------------------------------------ file io


def _ppm_tokens(buf: bytes):
    pos = 0
    while True:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        yield buf[start:pos], pos


def read_ppm(path: str | Path) -> ImageInput:
    """Read a binary PPM (P6, maxval <= 255, RGB)."""
    buf = Path(path).read_bytes()
    toks = _ppm_tokens(buf)
    header = []
    end = 0
    for _ in range(4):
        tok, end = next(toks)
        header.append(tok)
    if header[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {header[0]!r})")
    w, h, maxval = (int(t) for t in header[1:])
    if not 0 < maxval <= 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported (maxval {maxval})")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=end + 1)
    return ImageInput(raw.reshape(h, w, 3) / maxval)


def write_ppm(path: str | Path, img: ImageInput) -> None:
    data = np.round(img.pixels * 255).astype(np.uint8)
    header = f"P6\n{img.width} {img.height}\n255\n".encode()
    Path(path).write_bytes(header + data.tobytes())


def load_image(path: str | Path) -> ImageInput:
    """PPM files, or ``.npy`` arrays of shape (H, W, 3) for tests."""
    path = Path(path)
    if path.suffix == ".npy":
        return ImageInput(np.load(path))
    return read_ppm(path)


# ------------------------------------------------------------- resize/patch


def fitted_size(height: int, width: int, patch_size: int = 16, budget: int = 256) -> tuple[int, int]:
    """Output (height, width) in pixels for :func:`fit_to_budget`."""
    ph, pw = math.ceil(height / patch_size), math.ceil(width / patch_size)
    if ph * pw <= budget:
        return ph * patch_size, pw * patch_size
    # aspect-preserving patch extents with exactly `budget` area
    s = math.sqrt(budget * patch_size * patch_size / (height * width))
    rh, rw = height * s / patch_size, width * s / patch_size
    aspect = height / width
    best = None
    for r in {math.floor(rh), math.ceil(rh)}:
        for c in {math.floor(rw), math.ceil(rw)}:
            r, c = max(r, 1), max(c, 1)
            if r * c > budget:
                continue
            key = (r * c, -abs(r / c - aspect), -r)
            if best is None or key > best[0]:
                best = (key, r, c)
    if best is None:  # extreme aspect ratio: one side pinned at a single patch
        r = min(max(round(rh), 1), budget)
        c = min(max(round(rw), 1), budget // r)
        return r * patch_size, c * patch_size
    return best[1] * patch_size, best[2] * patch_size


def resize_bilinear(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling."""
    h, w = pixels.shape[:2]
    if (h, w) == (height, width):
        return pixels.copy()

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(h, height)
    x0, x1, wx = axis(w, width)
    wy = wy[:, None, None]
    wx = wx[None, :, None]
    top = pixels[y0][:, x0] * (1 - wx) + pixels[y0][:, x1] * wx
    bot = pixels[y1][:, x0] * (1 - wx) + pixels[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def fit_to_budget(img: ImageInput, patch_size: int = 16, budget: int = 256) -> ImageInput:
    """Resize so the image tiles into at most ``budget`` patches.

    Over-budget images are downscaled at (nearly) fixed aspect ratio to the
    largest patch count that fits; under-budget images are only rounded up to
    whole patches.
    """
    h, w = fitted_size(img.height, img.width, patch_size, budget)
    return ImageInput(resize_bilinear(img.pixels, h, w))


def patchify(img: ImageInput, patch_size: int = 16) -> PatchGrid:
    h, w = img.height, img.width
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} is not a multiple of patch size {patch_size}")
    rows, cols = h // patch_size, w // patch_size
    p = img.pixels.reshape(rows, patch_size, cols, patch_size, 3).transpose(0, 2, 1, 3, 4)
    return PatchGrid(rows, cols, patch_size, p.reshape(rows * cols, -1).copy())


def unpatchify(grid: PatchGrid) -> ImageInput:
    ps = grid.patch_size
    p = grid.patches.reshape(grid.rows, grid.cols, ps, ps, 3).transpose(0, 2, 1, 3, 4)
    return ImageInput(p.reshape(grid.rows * ps, grid.cols * ps, 3))


# ------------------------------------------------------------- stub encoder


@dataclass
class EncoderParams:
    patch_w: Tensor
    patch_b: Tensor
    pos_row: Tensor
    pos_col: Tensor
    blocks: list[BlockParams]
    ln_g: Tensor
    ln_b: Tensor

    @classmethod
    def init(cls, cfg: PipelineConfig, rng: np.random.Generator) -> "EncoderParams":
        d = cfg.d_v
        return cls(
            patch_w=Tensor(rng.standard_normal((cfg.patch_dim, d)) / math.sqrt(cfg.patch_dim)),
            patch_b=Tensor(np.zeros(d)),
            pos_row=Tensor(rng.standard_normal((cfg.patch_budget, d)) * 0.02),
            pos_col=Tensor(rng.standard_normal((cfg.patch_budget, d)) * 0.02),
            blocks=[BlockParams.init(rng, d, cfg.mlp_ratio) for _ in range(cfg.ve_layers)],
            ln_g=Tensor(np.ones(d)),
            ln_b=Tensor(np.zeros(d)),
        )

    def named(self, prefix: str = "ve"):
        for name in ("patch_w", "patch_b", "pos_row", "pos_col"):
            yield f"{prefix}.{name}", getattr(self, name)
        for i, b in enumerate(self.blocks):
            yield from b.named(f"{prefix}.blocks.{i}")
        yield f"{prefix}.ln_g", self.ln_g
        yield f"{prefix}.ln_b", self.ln_b

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for _, t in self.named())

    @frozen.setter
    def frozen(self, value: bool) -> None:
        for _, t in self.named():
            t.requires_grad = not value


def encode(
    grid: PatchGrid,
    params: EncoderParams,
    cfg: PipelineConfig,
    pad_values: np.ndarray | None = None,
) -> TokenSequence:
    """Run the stub encoder; output is always ``patch_budget`` rows.

    Rows past ``grid.count`` are padding: they are hidden from attention and
    zeroed on output. ``pad_values`` optionally fills the padded input rows
    with arbitrary content (used to check that padding never leaks).
    """
    n, budget = grid.count, cfg.patch_budget
    if n > budget:
        raise ValueError(f"{n} patches exceed the budget of {budget}")
    x = np.zeros((budget, cfg.patch_dim))
    x[:n] = grid.patches
    if pad_values is not None:
        x[n:] = np.asarray(pad_values).reshape(budget - n, cfg.patch_dim)
    mask = np.zeros(budget, dtype=np.int64)
    mask[:n] = 1
    rows = np.zeros(budget, dtype=np.int64)
    cols = np.zeros(budget, dtype=np.int64)
    rows[:n] = np.repeat(np.arange(grid.rows), grid.cols)
    cols[:n] = np.tile(np.arange(grid.cols), grid.rows)

    h = T.add(T.matmul(Tensor(x), params.patch_w), params.patch_b)
    h = T.add(h, T.add(T.take_rows(params.pos_row, rows), T.take_rows(params.pos_col, cols)))
    bias = attention_bias(mask, budget, budget)
    for b in params.blocks:
        h = block(h, b, cfg.ve_heads, bias)
    h = T.layernorm(h, params.ln_g, params.ln_b)
    return TokenSequence(T.keep(h, mask[:, None] > 0), mask)
