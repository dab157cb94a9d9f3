"""Joint token sequence layout, visibility policy and cross-attention slicing.

The sequence is always ordered ``[image, text, noise]``: condition tokens come
first and the noise-latent grid last, so every noise query can see every
condition key under the causal rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class TokenLayout:
    total_len: int
    noise_span: range
    image_span: range
    text_span: range
    sub_instructions: tuple[range, ...]
    grid_side: int
    image_grid_side: int | None = None

    def __post_init__(self) -> None:
        spans = (self.image_span, self.text_span, self.noise_span)
        covered = sorted(i for span in spans for i in span)
        if covered != list(range(self.total_len)):
            raise LayoutError("segments must partition the sequence")
        if len(self.noise_span) != self.grid_side**2 or self.grid_side < 1:
            raise LayoutError("noise span must hold grid_side**2 tokens")
        if len(self.image_span) and math.isqrt(len(self.image_span)) ** 2 != len(self.image_span):
            raise LayoutError("image span must be a perfect square")
        seen: set[int] = set()
        for span in self.sub_instructions:
            if not len(span) or span.start < self.text_span.start or span.stop > self.text_span.stop:
                raise LayoutError(f"sub-instruction {span} outside text span {self.text_span}")
            if seen.intersection(span):
                raise LayoutError(f"sub-instruction {span} overlaps another")
            seen.update(span)

    @property
    def k(self) -> int:
        return len(self.sub_instructions)

    @property
    def num_noise(self) -> int:
        return len(self.noise_span)

    @property
    def num_conditions(self) -> int:
        return len(self.image_span) + len(self.text_span)

    def to_json(self) -> dict:
        text0 = self.text_span.start
        return {
            "grid_side": self.grid_side,
            "image_grid_side": self.image_grid_side,
            "text_len": len(self.text_span),
            "spans": [[s.start - text0, s.stop - text0] for s in self.sub_instructions],
        }

    @classmethod
    def from_json(cls, obj: dict) -> TokenLayout:
        return build_layout(
            obj["grid_side"],
            obj.get("image_grid_side"),
            obj["text_len"],
            [tuple(s) for s in obj.get("spans", [])],
        )


def build_layout(
    noise_grid_side: int,
    image_grid_side: int | None,
    text_len: int,
    sub_instruction_spans: Sequence[tuple[int, int] | range],
) -> TokenLayout:
    """Build a ``[image, text, noise]`` layout.

    ``sub_instruction_spans`` are half-open ``(lo, hi)`` ranges relative to the
    start of the text segment.
    """
    if noise_grid_side < 1:
        raise LayoutError("noise grid side must be >= 1")
    if image_grid_side is not None and image_grid_side < 1:
        raise LayoutError("image grid side must be >= 1 or None")
    if text_len < 0:
        raise LayoutError("text_len must be >= 0")
    n_img = image_grid_side**2 if image_grid_side else 0
    image_span = range(0, n_img)
    text_span = range(n_img, n_img + text_len)
    noise_span = range(text_span.stop, text_span.stop + noise_grid_side**2)

    subs = []
    for span in sub_instruction_spans:
        lo, hi = (span.start, span.stop) if isinstance(span, range) else span
        if not 0 <= lo < hi <= text_len:
            raise LayoutError(f"span ({lo}, {hi}) out of bounds for text_len={text_len}")
        subs.append(range(text_span.start + lo, text_span.start + hi))

    return TokenLayout(
        total_len=noise_span.stop,
        noise_span=noise_span,
        image_span=image_span,
        text_span=text_span,
        sub_instructions=tuple(subs),
        grid_side=noise_grid_side,
        image_grid_side=image_grid_side if n_img else None,
    )


def _segment_ids(layout: TokenLayout) -> np.ndarray:
    seg = np.full(layout.total_len, -1, dtype=np.int64)
    seg[layout.image_span.start : layout.image_span.stop] = 0
    seg[layout.noise_span.start : layout.noise_span.stop] = 2
    return seg


def build_attention_policy(layout: TokenLayout) -> np.ndarray:
    """Boolean ``(query, key)`` visibility: causal, except bidirectional inside image and noise blocks."""
    n = layout.total_len
    idx = np.arange(n)
    allow = idx[None, :] <= idx[:, None]
    seg = _segment_ids(layout)
    # text tokens get id -1, which never matches, so text stays strictly causal
    same_block = (seg[:, None] == seg[None, :]) & (seg[:, None] >= 0)
    allow = allow | same_block
    allow.setflags(write=False)
    return allow


def slice_cross_attention(attention: np.ndarray, layout: TokenLayout) -> np.ndarray:
    """Rows: noise queries. Columns: image then text keys, in sequence order.

    Works on a single ``(n, n)`` matrix or any stack ``(..., n, n)``.
    """
    n = layout.total_len
    if attention.shape[-2:] != (n, n):
        raise LayoutError(f"attention shape {attention.shape[-2:]} != ({n}, {n})")
    ns = layout.noise_span
    return attention[..., ns.start : ns.stop, : layout.num_conditions]


def reshape_to_spatial(cross: np.ndarray, token_index: int, grid_side: int | None = None) -> np.ndarray:
    """Column ``token_index`` of a cross-attention slice as a row-major ``g x g`` map."""
    rows, cols = cross.shape[-2:]
    if not 0 <= token_index < cols:
        raise IndexError(f"token index {token_index} outside [0, {cols})")
    g = grid_side if grid_side is not None else math.isqrt(rows)
    if g * g != rows:
        raise LayoutError(f"{rows} rows is not a square grid")
    return cross[..., token_index].reshape(*cross.shape[:-2], g, g)


def flatten_spatial(grid: np.ndarray) -> np.ndarray:
    return grid.reshape(*grid.shape[:-2], -1)
