"""Step-wise and layer-wise blank-input perturbation curves on the toy backbone.

Prints the similarity of each perturbed latent to the unperturbed baseline and writes
step.csv, layers_top_down.csv and layers_bottom_up.csv under --out.
"""

import argparse
from pathlib import Path

from saas.backbone import Conditions, init_backbone
from saas.config import load_config
from saas.io import atomic_write, curve_csv
from saas.perturb import layer_sweep, step_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=None)
    ap.add_argument("--stride", type=int, default=5)
    ap.add_argument("--out", default="perturbation_curves")
    args = ap.parse_args()

    cfg = load_config(args.config)
    layout = cfg.layout.build()
    weights = init_backbone(cfg.backbone)
    cond = Conditions.random(layout, cfg.backbone.vocab_size, cfg.run.condition_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    steps = list(range(0, cfg.sampler.num_steps + 1, args.stride))
    reports = {"step": step_sweep(layout, weights, cfg.sampler, cond, steps)}
    for direction in ("top_down", "bottom_up"):
        reports[f"layers_{direction}"] = layer_sweep(layout, weights, cfg.sampler, cond, direction)

    for name, rep in reports.items():
        atomic_write(out / f"{name}.csv", curve_csv(rep.curve))
        print(name)
        for p, s in rep.curve:
            print(f"  {p:3d}  {s:.6f}")


if __name__ == "__main__":
    main()
