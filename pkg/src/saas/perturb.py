"""Blank-input perturbation runs and latent similarity curves."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import (
    BackboneWeights,
    Conditions,
    LatentState,
    SamplerConfig,
    condition_stream,
    embed_conditions,
    sample,
)
from .layout import TokenLayout

DIRECTIONS = ("top_down", "bottom_up")


@dataclass(frozen=True)
class BlankInput:
    """White image plus an all-padding instruction, and their embedded states."""

    conditions: Conditions
    image_states: np.ndarray
    text_states: np.ndarray


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    step_threshold: int | None = None
    layer_count: int | None = None
    direction: str | None = None
    single_step: bool = False

    def __post_init__(self) -> None:
        if self.kind == "step_wise":
            if self.step_threshold is None or self.step_threshold < 0:
                raise ValueError("step_wise perturbation needs step_threshold >= 0")
        elif self.kind == "layer_wise":
            if self.layer_count is None or self.layer_count < 0:
                raise ValueError("layer_wise perturbation needs layer_count >= 0")
            if self.direction not in DIRECTIONS:
                raise ValueError(f"direction must be one of {DIRECTIONS}")
        else:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")


@dataclass
class SimilarityReport:
    parameter: str
    curve: list[tuple[int, float]] = field(default_factory=list)
    baseline_id: str = "baseline"


def make_blank_input(layout: TokenLayout, weights: BackboneWeights) -> BlankInput:
    cond = Conditions.blank(layout)
    states = embed_conditions(cond, layout, weights)
    n_img = len(layout.image_span)
    return BlankInput(cond, states[:n_img], states[n_img:])


def latent_similarity(a: LatentState | np.ndarray, b: LatentState | np.ndarray) -> float:
    """Cosine similarity of the flattened latents."""
    x = np.ravel(a.values if isinstance(a, LatentState) else a)
    y = np.ravel(b.values if isinstance(b, LatentState) else b)
    if x.shape != y.shape:
        raise ValueError(f"latent shapes differ: {x.shape} vs {y.shape}")
    nx, ny = float(x @ x), float(y @ y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("zero-norm latent")
    if np.array_equal(x, y):
        return 1.0
    return float(np.clip((x @ y) / np.sqrt(nx * ny), -1.0, 1.0))


def perturbed_layers(num_layers: int, direction: str, n_layers: int) -> list[int]:
    """``bottom_up`` perturbs the first (shallowest) layers, ``top_down`` the last."""
    if not 0 <= n_layers <= num_layers:
        raise ValueError(f"n_layers must lie in [0, {num_layers}]")
    if direction == "bottom_up":
        return list(range(n_layers))
    if direction == "top_down":
        return list(range(num_layers - n_layers, num_layers))
    raise ValueError(f"direction must be one of {DIRECTIONS}")


def run_step_perturbation(
    layout: TokenLayout,
    weights: BackboneWeights,
    sampler: SamplerConfig,
    conditions: Conditions,
    step_s: int,
    single_step: bool = False,
) -> LatentState:
    """Real conditions before step ``step_s``, blank from it onward (or only at it)."""
    if not 0 <= step_s <= sampler.num_steps:
        raise ValueError(f"step_s must lie in [0, {sampler.num_steps}]")
    blank = make_blank_input(layout, weights).conditions

    def schedule(step: int) -> Conditions:
        hit = step == step_s if single_step else step >= step_s
        return blank if hit else conditions

    latent, _ = sample(layout, weights, sampler, conditions, capture="none", conditions_for_step=schedule)
    return latent


def run_layer_perturbation(
    layout: TokenLayout,
    weights: BackboneWeights,
    sampler: SamplerConfig,
    conditions: Conditions,
    layers: list[int],
) -> LatentState:
    """Condition states entering each listed layer are swapped for the blank input's.

    Every other layer still receives the real condition states of its pass, so a
    perturbed layer only affects the noise tokens that attend within it.
    """
    if not layers:
        latent, _ = sample(layout, weights, sampler, conditions, capture="none")
        return latent
    blank = condition_stream(make_blank_input(layout, weights).conditions, layout, weights)
    perturbed = frozenset(layers)
    cache: dict[int, tuple[Conditions, dict[int, np.ndarray]]] = {}

    def override(cond: Conditions) -> dict[int, np.ndarray]:
        hit = cache.get(id(cond))
        if hit is None or hit[0] is not cond:
            real = condition_stream(cond, layout, weights)
            hit = cache[id(cond)] = (cond, {l: blank[l] if l in perturbed else real[l] for l in real})
        return hit[1]

    latent, _ = sample(layout, weights, sampler, conditions, capture="none", condition_override=override)
    return latent


def perturb_steps(
    layout: TokenLayout,
    weights: BackboneWeights,
    sampler: SamplerConfig,
    conditions: Conditions,
    step_s: int,
    baseline: LatentState | None = None,
    single_step: bool = False,
) -> tuple[int, float]:
    if baseline is None:
        baseline, _ = sample(layout, weights, sampler, conditions, capture="none")
    latent = run_step_perturbation(layout, weights, sampler, conditions, step_s, single_step)
    return step_s, latent_similarity(baseline, latent)


def perturb_layers(
    layout: TokenLayout,
    weights: BackboneWeights,
    sampler: SamplerConfig,
    conditions: Conditions,
    direction: str,
    n_layers: int,
    baseline: LatentState | None = None,
) -> tuple[int, float]:
    if baseline is None:
        baseline, _ = sample(layout, weights, sampler, conditions, capture="none")
    layers = perturbed_layers(weights.config.num_layers, direction, n_layers)
    latent = run_layer_perturbation(layout, weights, sampler, conditions, layers)
    return n_layers, latent_similarity(baseline, latent)


def step_sweep(
    layout: TokenLayout,
    weights: BackboneWeights,
    sampler: SamplerConfig,
    conditions: Conditions,
    points: list[int],
    single_step: bool = False,
) -> SimilarityReport:
    baseline, _ = sample(layout, weights, sampler, conditions, capture="none")
    report = SimilarityReport("step")
    for s in points:
        report.curve.append(perturb_steps(layout, weights, sampler, conditions, s, baseline, single_step))
    return report


def layer_sweep(
    layout: TokenLayout,
    weights: BackboneWeights,
    sampler: SamplerConfig,
    conditions: Conditions,
    direction: str,
    points: list[int] | None = None,
) -> SimilarityReport:
    baseline, _ = sample(layout, weights, sampler, conditions, capture="none")
    if points is None:
        points = list(range(weights.config.num_layers + 1))
    report = SimilarityReport(f"layers_{direction}")
    for n in points:
        report.curve.append(perturb_layers(layout, weights, sampler, conditions, direction, n, baseline))
    return report


def run_perturbation(
    spec: PerturbationSpec,
    layout: TokenLayout,
    weights: BackboneWeights,
    sampler: SamplerConfig,
    conditions: Conditions,
) -> LatentState:
    if spec.kind == "step_wise":
        return run_step_perturbation(layout, weights, sampler, conditions, spec.step_threshold, spec.single_step)
    layers = perturbed_layers(weights.config.num_layers, spec.direction, spec.layer_count)
    return run_layer_perturbation(layout, weights, sampler, conditions, layers)
