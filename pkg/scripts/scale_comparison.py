"""Compare SaaS against fixed-factor instruction scaling (factors 1, 2, 5).

For each run, report the mean noise-query attention mass on instruction columns versus
image columns in vital layers, averaged over the intervention window. The trace holds raw
attention (before any rescaling), so differences between runs reflect how the rescaling of
earlier steps moved the trajectory, not the rescaled matrices themselves.
"""

import argparse

import numpy as np

from saas.cli import execute_run
from saas.config import load_config, with_overrides
from saas.core import SaasConfig
from saas.layout import slice_cross_attention


def window_masses(result, layout, saas_cfg: SaasConfig, num_layers: int):
    vital = saas_cfg.vital(num_layers)
    start, stop = saas_cfg.window
    img, txt = [], []
    for step in result.trace.steps:
        if not start <= step < stop:
            continue
        for layer in vital:
            cross = slice_cross_attention(result.trace.step(step)[layer], layout)
            img.append(cross[..., layout.image_span.start : layout.image_span.stop].sum(-1).mean())
            instr = [cross[..., s.start : s.stop].sum(-1).mean() for s in layout.sub_instructions]
            txt.append(sum(instr))
    return float(np.mean(img)), float(np.mean(txt))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    args = ap.parse_args()
    cfg = load_config(args.config)
    layout = cfg.layout.build()
    runs = [("baseline", {"mode": "baseline"}), ("saas", {"mode": "saas"})]
    runs += [(f"fixed x{f:g}", {"mode": "fixed", "factor": f}) for f in (1.0, 2.0, 5.0)]
    for label, run in runs:
        result = execute_run(with_overrides(cfg, run=run), capture="all")
        img, txt = window_masses(result, layout, cfg.saas, cfg.backbone.num_layers)
        print(f"{label:>10}  image mass={img:.4f}  instruction mass={txt:.4f}  ratio={img / txt:.3f}")


if __name__ == "__main__":
    main()
