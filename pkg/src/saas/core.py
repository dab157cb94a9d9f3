"""Self-adaptive attention scaling: maps, masks, scaling factors and the rewrite.

Pipeline for one denoising step ``t``::

    average over vital (layer, head) -> per-token g x g maps
    gaussian_smooth each map -> sum per sub-instruction / over image tokens
    minmax_normalize -> threshold -> mask
    ratio of in-mask image activation to in-mask instruction activation -> alpha

The resulting plan is applied to the attention of step ``t - 1`` (the next step
in sampling order) and the rows are renormalized afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .layout import TokenLayout, slice_cross_attention

TAU_EDITING = 0.4
TAU_VISUAL_CONDITIONAL = 0.2


@dataclass(frozen=True)
class SaasConfig:
    tau: float = TAU_EDITING
    threshold_mode: str = "fixed"
    xi: float | tuple[float, ...] = 1.0
    vital_layers: tuple[int, ...] | None = None
    window: tuple[int, int] = (0, 20)
    alpha_cap: float = 20.0
    kernel_size: int = 3
    kernel_sigma: float = 1.0
    outside_mask_mode: str = "zero"
    otsu_bins: int = 256
    force_alpha: float | None = None
    force_mask: str | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.threshold_mode not in ("fixed", "otsu"):
            raise ValueError(f"threshold_mode must be 'fixed' or 'otsu', got {self.threshold_mode!r}")
        if not self.alpha_cap > 0:
            raise ValueError("alpha_cap must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be an odd integer >= 1")
        if not self.kernel_sigma > 0:
            raise ValueError("kernel_sigma must be positive")
        if self.outside_mask_mode not in ("zero", "keep"):
            raise ValueError(f"outside_mask_mode must be 'zero' or 'keep', got {self.outside_mask_mode!r}")
        if self.vital_layers is not None and not self.vital_layers:
            raise ValueError("vital_layers must be nonempty")
        if self.window[0] < 0 or self.window[1] < self.window[0]:
            raise ValueError(f"invalid window {self.window}")
        if self.otsu_bins < 2:
            raise ValueError("otsu_bins must be >= 2")
        if self.force_mask not in (None, "all"):
            raise ValueError("force_mask must be None or 'all'")

    def vital(self, num_layers: int) -> tuple[int, ...]:
        if self.vital_layers is not None:
            return tuple(self.vital_layers)
        return tuple(range(num_layers // 2, num_layers))

    def xi_at(self, step: int) -> float:
        if isinstance(self.xi, (int, float)):
            return float(self.xi)
        return float(self.xi[min(step, len(self.xi) - 1)])

    def resolved(self, num_layers: int) -> SaasConfig:
        return replace(self, vital_layers=self.vital(num_layers))


def average_vital_cross_attention(
    step_attention: Mapping[int, np.ndarray], layout: TokenLayout, vital_layers: Sequence[int]
) -> np.ndarray:
    """Mean over vital layers and heads of each condition key's noise-query column.

    Returns ``(num_conditions, g, g)``; index ``j`` is the map of key ``j``.
    """
    missing = [l for l in vital_layers if l not in step_attention]
    if missing:
        raise KeyError(f"trace lacks vital layers {missing}")
    stack = np.stack([step_attention[l] for l in vital_layers])  # (L, H, n, n)
    cross = slice_cross_attention(stack, layout).mean(axis=(0, 1))  # (g*g, n_cond)
    g = layout.grid_side
    return np.ascontiguousarray(cross.T).reshape(-1, g, g)


def _gaussian_1d(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - size // 2
    k = np.exp(-(r**2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_kernel(size: int = 3, sigma: float = 1.0) -> np.ndarray:
    k1 = _gaussian_1d(size, sigma)
    return np.outer(k1, k1)


def gaussian_smooth(grid: np.ndarray, kernel_size: int = 3, sigma: float = 1.0) -> np.ndarray:
    """Separable normalized Gaussian blur with reflect padding over the last two axes."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be odd and >= 1")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    grid = np.asarray(grid, dtype=float)
    if kernel_size == 1:
        return grid.copy()
    k1 = _gaussian_1d(kernel_size, sigma)
    p = kernel_size // 2
    pad = [(0, 0)] * (grid.ndim - 2) + [(p, p), (p, p)]
    padded = np.pad(grid, pad, mode="reflect")
    h, w = grid.shape[-2:]
    rows = sum(k1[i] * padded[..., i : i + h, :] for i in range(kernel_size))
    out = sum(k1[j] * rows[..., :, j : j + w] for j in range(kernel_size))
    # a convex combination cannot leave the input range; clip rounding spill
    lo = grid.min(axis=(-2, -1), keepdims=True)
    hi = grid.max(axis=(-2, -1), keepdims=True)
    return np.clip(out, lo, hi)


def _aggregate(maps: np.ndarray, span: range) -> np.ndarray:
    if not len(span):
        raise ValueError("cannot aggregate over an empty span")
    return maps[span.start : span.stop].sum(axis=0)


def aggregate_instruction_map(maps: np.ndarray, span: range) -> np.ndarray:
    """Sum of the (already smoothed) per-token maps over one sub-instruction."""
    return _aggregate(maps, span)


def aggregate_image_map(maps: np.ndarray, image_span: range) -> np.ndarray:
    if not len(image_span):
        raise ValueError("layout has no image condition")
    return _aggregate(maps, image_span)


def minmax_normalize(grid: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale to [0, 1]. A constant map gives all zeros and ``degenerate=True``."""
    grid = np.asarray(grid, dtype=float)
    lo, hi = grid.min(), grid.max()
    if not hi > lo:
        return np.zeros_like(grid), True
    return (grid - lo) / (hi - lo), False


def extract_mask(normalized: np.ndarray, tau: float) -> np.ndarray:
    return np.asarray(normalized) >= tau


def otsu_index(hist: Sequence[float]) -> int | None:
    """Boundary ``j`` splitting bins ``[0, j)`` / ``[j, n)`` with maximal between-class variance.

    Scores are compared exactly in rational arithmetic; the first maximum wins.
    Returns None when fewer than two bins are occupied.
    """
    h = [Fraction(c) for c in np.asarray(hist).tolist()]  # python scalars: numpy ints overflow
    total = sum(h)
    moment = sum(i * c for i, c in enumerate(h))
    best, best_j = None, None
    n0 = s0 = Fraction(0)
    for j in range(1, len(h)):
        n0 += h[j - 1]
        s0 += (j - 1) * h[j - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # proportional to w0 * w1 * (mu0 - mu1)**2
        score = (total * s0 - n0 * moment) ** 2 / (n0 * n1)
        if best is None or score > best:
            best, best_j = score, j
    return best_j


def histogram(normalized: np.ndarray, bins: int = 256) -> np.ndarray:
    v = np.asarray(normalized, dtype=float).ravel()
    idx = np.clip(np.floor(v * bins), 0, bins - 1).astype(np.int64)
    return np.bincount(idx, minlength=bins)


def otsu_threshold(normalized: np.ndarray, bins: int = 256) -> tuple[float, bool]:
    """Otsu threshold on a map in [0, 1]. Returns ``(tau, degenerate)``; degenerate gives tau 0."""
    if np.asarray(normalized).size == 0:
        raise ValueError("empty map")
    j = otsu_index(histogram(normalized, bins))
    if j is None:
        return 0.0, True
    return j / bins, False


def compute_scaling_factor(
    image_map: np.ndarray, instruction_map: np.ndarray, mask: np.ndarray, alpha_cap: float = 20.0
) -> tuple[float, bool]:
    """In-mask image activation over in-mask instruction activation, capped.

    Returns ``(alpha, skipped)``; an empty mask or a non-positive ratio yields
    ``(1.0, True)``.
    """
    if not image_map.shape == instruction_map.shape == mask.shape:
        raise ValueError("map and mask shapes differ")
    if not mask.any():
        return 1.0, True
    num = float(np.sum(image_map[mask]))
    den = float(np.sum(instruction_map[mask]))
    if not den > 0 or not num > 0:
        return 1.0, True
    return min(num / den, alpha_cap), False


@dataclass(frozen=True)
class InstructionMask:
    grid: np.ndarray
    instruction: int
    source_step: int


@dataclass(frozen=True)
class PlanEntry:
    span: range
    mask: InstructionMask
    alpha: float
    tau: float
    degenerate: bool = False
    skipped: bool = False


@dataclass(frozen=True)
class SaasPlan:
    source_step: int
    entries: tuple[PlanEntry, ...] = ()
    # per-token smoothed maps and the image map, kept for dumps
    maps: np.ndarray | None = field(default=None, compare=False, repr=False)
    image_map: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def k(self) -> int:
        return len(self.entries)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def build_plan(
    step_attention: Mapping[int, np.ndarray],
    layout: TokenLayout,
    config: SaasConfig,
    step: int,
    num_layers: int | None = None,
) -> SaasPlan:
    """Masks and scaling factors for every sub-instruction from one step's attention."""
    if config.vital_layers is None:
        if num_layers is None:
            raise ValueError("num_layers is needed to resolve the default vital layers")
        config = config.resolved(num_layers)
    if not layout.sub_instructions:
        return SaasPlan(step)

    g = layout.grid_side
    maps = average_vital_cross_attention(step_attention, layout, config.vital_layers)
    smoothed = gaussian_smooth(maps, config.kernel_size, config.kernel_sigma)
    image_map = aggregate_image_map(smoothed, layout.image_span) if len(layout.image_span) else None

    entries = []
    for i, span in enumerate(layout.sub_instructions):
        instr = aggregate_instruction_map(smoothed, span)
        normed, degenerate = minmax_normalize(instr)
        if config.threshold_mode == "otsu" and not degenerate:
            tau, _ = otsu_threshold(normed, config.otsu_bins)
        else:
            tau = config.tau
        if config.force_mask == "all":
            grid, degenerate = np.ones((g, g), dtype=bool), False
        elif degenerate:
            grid = np.zeros((g, g), dtype=bool)
        else:
            grid = extract_mask(normed, tau)

        if config.force_alpha is not None:
            alpha, skipped = float(config.force_alpha), False
        elif image_map is None or degenerate:
            alpha, skipped = 1.0, True
        else:
            alpha, skipped = compute_scaling_factor(image_map, instr, grid, config.alpha_cap)
        entries.append(
            PlanEntry(
                span=span,
                mask=InstructionMask(_frozen(grid), i, step),
                alpha=alpha,
                tau=float(tau),
                degenerate=degenerate,
                skipped=skipped,
            )
        )
    return SaasPlan(step, tuple(entries), _frozen(smoothed), None if image_map is None else _frozen(image_map))


def apply_plan(
    attention: np.ndarray,
    layout: TokenLayout,
    plan: SaasPlan,
    xi: float = 1.0,
    outside_mask_mode: str = "zero",
) -> np.ndarray:
    """Rescale instruction keys for noise queries; the result is *not* renormalized.

    Inside a sub-instruction's mask its key columns are multiplied by
    ``xi * alpha``; outside they are zeroed (``"zero"``) or left alone
    (``"keep"``). Skipped entries leave the matrix untouched.
    """
    if outside_mask_mode not in ("zero", "keep"):
        raise ValueError(f"unknown outside_mask_mode {outside_mask_mode!r}")
    n = layout.total_len
    if attention.shape[-2:] != (n, n):
        raise ValueError(f"attention shape {attention.shape[-2:]} does not match layout ({n})")
    if plan.k != layout.k:
        raise ValueError(f"plan has {plan.k} entries, layout has {layout.k} sub-instructions")
    out = np.array(attention, dtype=float, copy=True)
    ns = layout.noise_span
    for entry, span in zip(plan.entries, layout.sub_instructions):
        if entry.span != span:
            raise ValueError(f"plan span {entry.span} != layout span {span}")
        if entry.skipped:
            continue
        inside = entry.mask.grid.reshape(-1)
        if inside.size != len(ns):
            raise ValueError("mask grid does not match the noise grid")
        scale = np.where(inside, xi * entry.alpha, 0.0 if outside_mask_mode == "zero" else 1.0)
        out[..., ns.start : ns.stop, span.start : span.stop] *= scale[:, None]
    return out


def renormalize_attention(matrix: np.ndarray, policy: np.ndarray | None = None) -> np.ndarray:
    """Divide every query row by its total mass."""
    m = np.asarray(matrix, dtype=float)
    if policy is not None:
        if np.any(m[..., ~policy] != 0):
            raise ValueError("nonzero mass at a policy-forbidden position")
    if np.any(m < 0):
        raise ValueError("negative attention entries")
    sums = m.sum(axis=-1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("a query row has zero total mass")
    return m / sums


def fixed_scale_baseline(
    attention: np.ndarray,
    layout: TokenLayout,
    spans: Sequence[range],
    factor: float,
    policy: np.ndarray | None = None,
) -> np.ndarray:
    """Multiply every noise-query / instruction-key entry by ``factor``, then renormalize."""
    if not factor > 0 or not math.isfinite(factor):
        raise ValueError("factor must be positive and finite")
    out = np.array(attention, dtype=float, copy=True)
    ns = layout.noise_span
    for span in spans:
        out[..., ns.start : ns.stop, span.start : span.stop] *= factor
    return renormalize_attention(out, policy)
