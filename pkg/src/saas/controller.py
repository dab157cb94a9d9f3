"""Step-to-step driver that plugs SaaS (or the fixed-factor ablation) into ``sample``."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .backbone import Intervention
from .core import SaasConfig, SaasPlan, apply_plan, build_plan, fixed_scale_baseline, renormalize_attention
from .layout import TokenLayout, build_attention_policy

MODES = ("saas", "fixed")


class SaasController:
    """Builds a plan from step ``t`` and applies it during step ``t + 1`` (sampling order).

    Only vital layers are touched, for all heads, and only inside the step
    window. The first window step has no earlier plan and runs unscaled.
    In ``"fixed"`` mode every window step multiplies instruction attention by
    ``factor`` without masks.
    """

    def __init__(
        self,
        layout: TokenLayout,
        config: SaasConfig,
        num_layers: int,
        mode: str = "saas",
        factor: float = 1.0,
    ) -> None:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.layout = layout
        self.config = config.resolved(num_layers)
        self.mode = mode
        self.factor = factor
        self.policy = build_attention_policy(layout)
        self.vital = frozenset(self.config.vital_layers)
        if max(self.vital) >= num_layers or min(self.vital) < 0:
            raise ValueError(f"vital layers {sorted(self.vital)} outside [0, {num_layers})")
        self.capture_layers = self.vital if mode == "saas" else frozenset()
        self.plans: dict[int, SaasPlan] = {}

    def in_window(self, step: int) -> bool:
        lo, hi = self.config.window
        return lo <= step < hi

    def begin_step(self, step: int) -> Intervention | None:
        if not self.in_window(step):
            return None
        if self.mode == "fixed":
            spans = self.layout.sub_instructions

            def transform(attn: np.ndarray) -> np.ndarray:
                return fixed_scale_baseline(attn, self.layout, spans, self.factor, self.policy)

        else:
            plan = self.plans.get(step - 1)
            if plan is None:
                return None
            xi = self.config.xi_at(plan.source_step)
            mode = self.config.outside_mask_mode

            def transform(attn: np.ndarray) -> np.ndarray:
                scaled = apply_plan(attn, self.layout, plan, xi, mode)
                return renormalize_attention(scaled, self.policy)

        def intervention(layer: int, attn: np.ndarray) -> np.ndarray:
            return transform(attn) if layer in self.vital else attn

        return intervention

    def end_step(self, step: int, attention: Mapping[int, np.ndarray]) -> None:
        if self.mode == "saas" and self.in_window(step) and self.in_window(step + 1):
            self.plans[step] = build_plan(attention, self.layout, self.config, step)
