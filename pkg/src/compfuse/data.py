"""Synthetic caption / VQA samples on parametric images.

Every sample is a pure function of ``(kind, seed)``. Images are black
canvases with axis-aligned coloured squares snapped to a 16-pixel cell grid,
so each square covers exactly one patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .llm import EOS, encode_text, prompt_ids
from .vision import ImageInput

KINDS = ("color-caption", "count-vqa", "position-vqa")

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
}

PROMPTS = {
    "color-caption": "describe",
    "count-vqa": "how many?",
    "position-vqa": "where?",
}


@dataclass(frozen=True)
class Sample:
    kind: str
    image: ImageInput
    prompt: tuple[int, ...]
    target: tuple[int, ...]  # answer ids, ending with EOS

    @property
    def text_ids(self) -> list[int]:
        """Teacher-forced decoder input: prompt plus all but the last target id."""
        return [*self.prompt, *self.target[:-1]]

    @property
    def target_rows(self) -> list[int]:
        """Text-relative positions whose next-token prediction is supervised."""
        start = len(self.prompt) - 1
        return list(range(start, start + len(self.target)))


def _canvas(size: int) -> np.ndarray:
    return np.zeros((size, size, 3))


def _paint(px: np.ndarray, cell: tuple[int, int], color, cell_px: int = 16) -> None:
    r, c = cell
    px[r * cell_px : (r + 1) * cell_px, c * cell_px : (c + 1) * cell_px] = color


def make_sample(kind: str, seed: int, size: int = 64) -> Sample:
    if kind not in KINDS:
        raise ValueError(f"unknown task kind {kind!r}")
    rng = np.random.default_rng([KINDS.index(kind), seed])
    cells = size // 16
    px = _canvas(size)
    all_cells = [(r, c) for r in range(cells) for c in range(cells)]
    if kind == "color-caption":
        name = list(COLORS)[rng.integers(len(COLORS))]
        k = int(rng.integers(1, 3))
        for i in rng.choice(len(all_cells), size=k, replace=False):
            _paint(px, all_cells[i], COLORS[name])
        answer = f"{name} box"
    elif kind == "count-vqa":
        k = int(rng.integers(1, 5))
        palette = list(COLORS.values())
        for i in rng.choice(len(all_cells), size=k, replace=False):
            _paint(px, all_cells[i], palette[rng.integers(len(palette))])
        answer = str(k)
    else:
        half = cells // 2
        vert, horiz = int(rng.integers(2)), int(rng.integers(2))
        r = int(rng.integers(half)) + vert * half
        c = int(rng.integers(half)) + horiz * half
        _paint(px, (r, c), COLORS["white"])
        answer = f"{('top', 'bottom')[vert]} {('left', 'right')[horiz]}"
    return Sample(
        kind=kind,
        image=ImageInput(px),
        prompt=tuple(prompt_ids(PROMPTS[kind])),
        target=(*encode_text(answer), EOS),
    )


def make_dataset(kinds: tuple[str, ...], n: int, seed: int, size: int = 64) -> list[Sample]:
    """``n`` samples cycling through ``kinds``; seeds are offset by ``seed * 10**6``."""
    base = seed * 10**6
    return [make_sample(kinds[i % len(kinds)], base + i, size) for i in range(n)]
