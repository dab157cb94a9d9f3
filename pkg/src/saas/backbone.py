"""A small deterministic transformer denoiser with flow-matching sampling.

The network attends over the joint ``[image, text, noise]`` sequence under the
layout's visibility policy, exposes every attention matrix to a capture sink
and lets an intervention rewrite it before it is applied to the values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Protocol, Sequence

import numpy as np

from .layout import TokenLayout, build_attention_policy

PAD_TOKEN = 0

# (layer, attention[heads, n, n]) -> attention[heads, n, n]
Intervention = Callable[[int, np.ndarray], np.ndarray]
AttentionSink = Callable[[int, np.ndarray], None]


class NumericalError(FloatingPointError):
    pass


class InterventionError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    num_layers: int = 8
    num_heads: int = 4
    model_dim: int = 64
    seed: int = 0
    vocab_size: int = 32

    def __post_init__(self) -> None:
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")
        if self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.model_dim % 2:
            raise ValueError("model_dim must be even")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 50
    image_guidance: float = 1.6
    text_guidance: float = 2.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not (math.isfinite(self.image_guidance) and math.isfinite(self.text_guidance)):
            raise ValueError("guidance scales must be finite")


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass(frozen=True)
class BackboneWeights:
    config: BackboneConfig
    layers: tuple[LayerWeights, ...]
    token_table: np.ndarray
    pixel_dir: np.ndarray
    segment: np.ndarray
    time_dir: np.ndarray
    out_proj: np.ndarray
    mode: str = "seeded"
    script: Sequence[Callable[[int, int], float]] | None = None
    _script_cache: dict = field(default_factory=dict, compare=False, repr=False)

    def arrays(self) -> Iterator[np.ndarray]:
        for lw in self.layers:
            yield from (lw.wq, lw.wk, lw.wv, lw.wo, lw.w1, lw.w2)
        yield from (self.token_table, self.pixel_dir, self.segment, self.time_dir, self.out_proj)

    def scripted_logits(self, layer: int, policy: np.ndarray) -> np.ndarray:
        """Materialize the rigged logits for one layer on the permitted (q, k) pairs."""
        n = policy.shape[0]
        key = (layer, n)
        if key not in self._script_cache:
            fn = self.script[layer]
            logits = np.zeros((n, n))
            for q, k in zip(*np.nonzero(policy)):
                value = float(fn(int(q), int(k)))
                if not math.isfinite(value):
                    raise ValueError(f"scripted logit ({q}, {k}) in layer {layer} is not finite")
                logits[q, k] = value
            logits.setflags(write=False)
            self._script_cache[key] = logits
        return self._script_cache[key]


@dataclass(frozen=True)
class LatentState:
    t: int
    values: np.ndarray


@dataclass(frozen=True)
class Conditions:
    """Raw condition inputs: an image grid in [0, 1] and text token ids."""

    image: np.ndarray | None
    text_ids: np.ndarray

    @classmethod
    def blank(cls, layout: TokenLayout) -> Conditions:
        g = layout.image_grid_side
        image = np.ones((g, g)) if g else None
        return cls(image, np.full(len(layout.text_span), PAD_TOKEN, dtype=np.int64))

    @classmethod
    def random(cls, layout: TokenLayout, vocab_size: int, seed: int) -> Conditions:
        rng = np.random.default_rng(seed)
        g = layout.image_grid_side
        image = rng.uniform(0.0, 1.0, size=(g, g)) if g else None
        ids = rng.integers(1, vocab_size, size=len(layout.text_span))
        return cls(image, ids)

    def with_text(self, other: Conditions) -> Conditions:
        return Conditions(self.image, other.text_ids)


ConditionOverride = Callable[[Conditions], Mapping[int, np.ndarray]] | Mapping[int, np.ndarray]


def init_backbone(config: BackboneConfig) -> BackboneWeights:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    d = config.model_dim
    hidden = 2 * d

    def mat(rows: int, cols: int, gain: float = 1.0) -> np.ndarray:
        return rng.standard_normal((rows, cols)) * (gain / math.sqrt(rows))

    layers = tuple(
        LayerWeights(
            wq=mat(d, d, 1.5),
            wk=mat(d, d, 1.5),
            wv=mat(d, d),
            wo=mat(d, d, 0.5),
            w1=mat(d, hidden),
            w2=mat(hidden, d, 0.5),
        )
        for _ in range(config.num_layers)
    )
    weights = BackboneWeights(
        config=config,
        layers=layers,
        token_table=rng.standard_normal((config.vocab_size, d)),
        pixel_dir=rng.standard_normal(d),
        segment=rng.standard_normal((3, d)),
        time_dir=rng.standard_normal(d),
        out_proj=mat(d, d),
    )
    for a in weights.arrays():
        a.setflags(write=False)
    return weights


def rig_backbone(
    scripted_logits: Callable[[int, int], float] | Sequence[Callable[[int, int], float]],
    config: BackboneConfig | None = None,
    layout: TokenLayout | None = None,
) -> BackboneWeights:
    """Seeded weights whose attention logits are replaced by a script.

    ``scripted_logits`` is either one ``(query, key) -> logit`` function shared by
    every layer or one function per layer. Passing ``layout`` evaluates the
    script eagerly so bad logits fail here instead of mid-run.
    """
    config = config or BackboneConfig()
    if callable(scripted_logits):
        script = [scripted_logits] * config.num_layers
    else:
        script = list(scripted_logits)
        if len(script) != config.num_layers:
            raise ValueError(f"need {config.num_layers} per-layer scripts, got {len(script)}")
    base = init_backbone(config)
    weights = BackboneWeights(
        config=config,
        layers=base.layers,
        token_table=base.token_table,
        pixel_dir=base.pixel_dir,
        segment=base.segment,
        time_dir=base.time_dir,
        out_proj=base.out_proj,
        mode="rigged",
        script=tuple(script),
    )
    if layout is not None:
        policy = build_attention_policy(layout)
        for layer in range(config.num_layers):
            weights.scripted_logits(layer, policy)
    return weights


def _sinusoid(positions: np.ndarray, d: int) -> np.ndarray:
    freqs = np.exp(-math.log(1000.0) * np.arange(d // 2) / max(d // 2, 1))
    angles = positions[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def embed_conditions(conditions: Conditions, layout: TokenLayout, weights: BackboneWeights) -> np.ndarray:
    """Token states for the image and text segments, ``(num_conditions, d)``."""
    d = weights.config.model_dim
    parts = []
    if len(layout.image_span):
        if conditions.image is None:
            raise ValueError("layout has an image segment but no image was given")
        pix = np.asarray(conditions.image, dtype=float).reshape(-1)
        if pix.size != len(layout.image_span):
            raise ValueError(f"image has {pix.size} pixels, layout expects {len(layout.image_span)}")
        pos = _sinusoid(np.arange(pix.size, dtype=float), d)
        parts.append(pix[:, None] * weights.pixel_dir[None, :] + weights.segment[0] + pos)
    ids = np.asarray(conditions.text_ids, dtype=np.int64)
    if ids.size != len(layout.text_span):
        raise ValueError(f"got {ids.size} text ids, layout expects {len(layout.text_span)}")
    if ids.size:
        pos = _sinusoid(np.arange(ids.size, dtype=float), d)
        parts.append(weights.token_table[ids % weights.config.vocab_size] + weights.segment[1] + pos)
    if not parts:
        return np.zeros((0, d))
    return np.concatenate(parts, axis=0)


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6)


def masked_softmax(logits: np.ndarray, policy: np.ndarray) -> np.ndarray:
    """Softmax over visible keys; forbidden entries come out exactly 0."""
    z = np.where(policy, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def check_stochastic(attn: np.ndarray, policy: np.ndarray, atol: float = 1e-9) -> None:
    if np.any(attn[..., ~policy] != 0.0):
        raise InterventionError("attention is nonzero at a policy-forbidden position")
    if np.any(attn < 0) or not np.all(np.isfinite(attn)):
        raise InterventionError("attention has negative or non-finite entries")
    sums = attn.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > atol):
        raise InterventionError(f"attention rows sum to {sums.min()}..{sums.max()}, expected 1")


def forward(
    latent: LatentState,
    layout: TokenLayout,
    weights: BackboneWeights,
    policy: np.ndarray,
    conditions: np.ndarray,
    intervention: Intervention | None = None,
    sink: AttentionSink | None = None,
    condition_override: Mapping[int, np.ndarray] | None = None,
    hidden_sink: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """One denoiser evaluation; returns the velocity for the noise tokens.

    ``conditions`` are embedded condition states (see ``embed_conditions``).
    ``condition_override[layer]`` replaces the condition states entering that
    layer. ``sink`` sees the raw softmax attention; ``intervention`` may return a
    rewritten matrix, which must stay row-stochastic under the policy.
    """
    cfg = weights.config
    d, H = cfg.model_dim, cfg.num_heads
    dh = d // H
    n_cond = layout.num_conditions
    if latent.values.shape != (layout.num_noise, d):
        raise ValueError(f"latent shape {latent.values.shape} != {(layout.num_noise, d)}")
    if conditions.shape != (n_cond, d):
        raise ValueError(f"condition states shape {conditions.shape} != {(n_cond, d)}")

    noise_pos = _sinusoid(np.arange(layout.num_noise, dtype=float), d)
    t_emb = math.sin(0.1 * latent.t) * weights.time_dir
    h = np.concatenate([conditions, latent.values + noise_pos + weights.segment[2] + t_emb], axis=0)
    n = h.shape[0]

    for l, lw in enumerate(weights.layers):
        if condition_override is not None and l in condition_override:
            h = h.copy()
            h[:n_cond] = condition_override[l]
        if hidden_sink is not None:
            hidden_sink(l, h)
        x = _layer_norm(h)
        v = (x @ lw.wv).reshape(n, H, dh).transpose(1, 0, 2)
        if weights.mode == "rigged":
            logits = np.broadcast_to(weights.scripted_logits(l, policy), (H, n, n))
        else:
            q = (x @ lw.wq).reshape(n, H, dh).transpose(1, 0, 2)
            k = (x @ lw.wk).reshape(n, H, dh).transpose(1, 0, 2)
            logits = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
        attn = masked_softmax(logits, policy)
        if sink is not None:
            sink(l, attn)
        if intervention is not None:
            new = intervention(l, attn)
            if new is not attn:
                check_stochastic(new, policy)
                attn = new
        out = (attn @ v).transpose(1, 0, 2).reshape(n, d)
        h = h + out @ lw.wo
        h = h + np.tanh(_layer_norm(h) @ lw.w1) @ lw.w2
        if not np.all(np.isfinite(h)):
            raise NumericalError(f"non-finite hidden state after layer {l}")

    vel = _layer_norm(h[layout.noise_span.start :]) @ weights.out_proj
    if not np.all(np.isfinite(vel)):
        raise NumericalError("non-finite velocity")
    return vel


def guided_velocity(v_uncond, v_img, v_full, image_guidance: float, text_guidance: float):
    """Two-condition classifier-free guidance (image first, then text on top)."""
    v_uncond, v_img, v_full = np.asarray(v_uncond), np.asarray(v_img), np.asarray(v_full)
    if not v_uncond.shape == v_img.shape == v_full.shape:
        raise ValueError("velocity shapes differ")
    return v_uncond + image_guidance * (v_img - v_uncond) + text_guidance * (v_full - v_img)


def flow_step(latent: LatentState, velocity: np.ndarray, dt: float) -> LatentState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return LatentState(latent.t - 1, latent.values + dt * velocity)


@dataclass(frozen=True)
class AttentionRecord:
    step: int
    layer: int
    head: int
    matrix: np.ndarray


class AttentionTrace:
    """Raw attention of the fully-conditioned pass, keyed by (step, layer)."""

    def __init__(self) -> None:
        self._data: dict[int, dict[int, np.ndarray]] = {}

    def add(self, step: int, layer: int, attn: np.ndarray) -> None:
        self._data.setdefault(step, {})[layer] = attn

    def step(self, step: int) -> dict[int, np.ndarray]:
        return self._data.get(step, {})

    @property
    def steps(self) -> list[int]:
        return sorted(self._data)

    def records(self) -> Iterator[AttentionRecord]:
        for s in self.steps:
            for layer in sorted(self._data[s]):
                for head, m in enumerate(self._data[s][layer]):
                    yield AttentionRecord(s, layer, head, m)

    def __len__(self) -> int:
        return sum(a.shape[0] for layers in self._data.values() for a in layers.values())


class Controller(Protocol):
    capture_layers: frozenset[int]

    def begin_step(self, step: int) -> Intervention | None: ...

    def end_step(self, step: int, attention: Mapping[int, np.ndarray]) -> None: ...


def initial_latent(layout: TokenLayout, weights: BackboneWeights, sampler: SamplerConfig) -> LatentState:
    rng = np.random.Generator(np.random.PCG64(sampler.seed))
    values = rng.standard_normal((layout.num_noise, weights.config.model_dim))
    return LatentState(sampler.num_steps, values)


def sample(
    layout: TokenLayout,
    weights: BackboneWeights,
    sampler: SamplerConfig,
    conditions: Conditions,
    controller: Controller | None = None,
    *,
    capture: str | Sequence[int] = "all",
    conditions_for_step: Callable[[int], Conditions] | None = None,
    condition_override: ConditionOverride | None = None,
) -> tuple[LatentState, AttentionTrace]:
    """Euler-integrate the guided flow from seeded Gaussian noise.

    Each step runs three passes: blank conditions, image only, image and text.
    Attention of the full pass is captured (``capture``: "all", "none" or a list
    of layers) and the controller sees that step's raw attention after the
    step, so whatever it plans is applied at the next step.
    ``condition_override`` is used for the image-only and full passes; it is a
    layer -> states mapping, or a callable building that mapping from the
    pass's conditions.
    """
    policy = build_attention_policy(layout)
    num_layers = weights.config.num_layers
    if capture == "all":
        keep = frozenset(range(num_layers))
    elif capture == "none":
        keep = frozenset()
    else:
        keep = frozenset(capture)
    needed = keep | (controller.capture_layers if controller is not None else frozenset())

    blank = Conditions.blank(layout)
    embedded: dict[int, tuple[Conditions, np.ndarray]] = {}

    def embed(c: Conditions) -> np.ndarray:
        hit = embedded.get(id(c))
        if hit is None or hit[0] is not c:
            hit = (c, embed_conditions(c, layout, weights))
            embedded[id(c)] = hit
        return hit[1]

    image_only_cache: dict[int, tuple[Conditions, Conditions]] = {}
    trace = AttentionTrace()
    state = initial_latent(layout, weights, sampler)
    dt = 1.0 / sampler.num_steps

    for step in range(sampler.num_steps):
        cond = conditions_for_step(step) if conditions_for_step is not None else conditions
        hit = image_only_cache.get(id(cond))
        if hit is None or hit[0] is not cond:
            hit = image_only_cache[id(cond)] = (cond, cond.with_text(blank))
        image_only = hit[1]
        intervention = controller.begin_step(step) if controller is not None else None

        captured: dict[int, np.ndarray] = {}

        def sink(layer: int, attn: np.ndarray) -> None:
            if layer in needed:
                captured[layer] = attn

        v_u = forward(state, layout, weights, policy, embed(blank))
        v_i = forward(state, layout, weights, policy, embed(image_only),
                      condition_override=_resolve_override(condition_override, image_only))
        v_f = forward(
            state, layout, weights, policy, embed(cond),
            intervention=intervention, sink=sink, condition_override=_resolve_override(condition_override, cond),
        )
        velocity = guided_velocity(v_u, v_i, v_f, sampler.image_guidance, sampler.text_guidance)

        for layer in keep:
            trace.add(step, layer, captured[layer])
        if controller is not None:
            controller.end_step(step, captured)
        state = flow_step(state, velocity, dt)

    return state, trace


def _resolve_override(override: ConditionOverride | None, cond: Conditions) -> Mapping[int, np.ndarray] | None:
    return override(cond) if callable(override) else override


def condition_stream(
    conditions: Conditions, layout: TokenLayout, weights: BackboneWeights
) -> dict[int, np.ndarray]:
    """Condition-token states entering each layer.

    Condition tokens precede the noise tokens and attend causally, so these
    states do not depend on the latent; a zero latent is used.
    """
    policy = build_attention_policy(layout)
    n_cond = layout.num_conditions
    states: dict[int, np.ndarray] = {}
    latent = LatentState(0, np.zeros((layout.num_noise, weights.config.model_dim)))
    forward(
        latent, layout, weights, policy, embed_conditions(conditions, layout, weights),
        hidden_sink=lambda l, h: states.__setitem__(l, h[:n_cond].copy()),
    )
    return states
