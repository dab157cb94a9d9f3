"""Command-line entry point: ``saas run | perturb | dump-attn | bench``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import statistics
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import (
    AttentionTrace,
    Conditions,
    InterventionError,
    LatentState,
    NumericalError,
    init_backbone,
    sample,
)
from .config import ConfigError, RunConfig, config_from_snapshot, load_config
from .controller import SaasController
from .core import SaasPlan, build_plan, minmax_normalize
from .io import (
    canonical_json,
    curve_csv,
    load_trace,
    read_json,
    save_trace,
    write_json,
    write_map_pgm,
    write_mask_pgm,
    write_matrix,
    atomic_write,
)
from .perturb import layer_sweep, step_sweep

log = logging.getLogger("saas")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

REFERENCE_LATENCY = (29.1, 29.4, 1.03)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunResult:
    latent: LatentState
    trace: AttentionTrace
    controller: SaasController | None
    timings: dict[str, float]


def execute_run(cfg: RunConfig, capture: str = "none") -> RunResult:
    timings = {}
    t0 = time.perf_counter()
    layout = cfg.layout.build()
    weights = init_backbone(cfg.backbone)
    conditions = Conditions.random(layout, cfg.backbone.vocab_size, cfg.run.condition_seed)
    controller = None
    if cfg.run.mode == "saas":
        controller = SaasController(layout, cfg.saas, cfg.backbone.num_layers, "saas")
    elif cfg.run.mode == "fixed":
        controller = SaasController(layout, cfg.saas, cfg.backbone.num_layers, "fixed", cfg.run.factor)
    t1 = time.perf_counter()
    latent, trace = sample(layout, weights, cfg.sampler, conditions, controller, capture=capture)
    t2 = time.perf_counter()
    timings["setup_s"] = t1 - t0
    timings["sample_s"] = t2 - t1
    return RunResult(latent, trace, controller, timings)


def latent_preview(latent: LatentState, grid_side: int) -> np.ndarray:
    grid = latent.values.mean(axis=1).reshape(grid_side, grid_side)
    return minmax_normalize(grid)[0]


def plan_summary(plan: SaasPlan) -> dict:
    return {
        "source_step": plan.source_step,
        "entries": [
            {
                "instruction": e.mask.instruction,
                "span": [e.span.start, e.span.stop],
                "alpha": e.alpha,
                "tau": e.tau,
                "mask_cells": int(e.mask.grid.sum()),
                "degenerate": e.degenerate,
                "skipped": e.skipped,
            }
            for e in plan.entries
        ],
    }


def _run_overrides(args: argparse.Namespace) -> dict:
    return {
        "run.mode": args.mode,
        "run.factor": args.factor,
        "sampler.seed": args.seed,
        "sampler.num_steps": args.steps,
        "backbone.seed": args.weights_seed,
        "saas.tau": args.tau,
        "saas.threshold_mode": args.threshold,
        "saas.outside_mask_mode": args.outside,
        "saas.force_alpha": args.force_alpha,
        "saas.force_mask": args.mask,
    }


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _run_overrides(args))
    out = Path(args.out or f"runs/{cfg.run.mode}-seed{cfg.sampler.seed}")
    result = execute_run(cfg, capture="all" if args.dump_trace else "none")
    layout = cfg.layout.build()

    t0 = time.perf_counter()
    outputs = {"latent": "latent.f64", "preview": "preview.pgm"}
    write_matrix(out / "latent.f64", result.latent.values)
    write_map_pgm(out / "preview.pgm", latent_preview(result.latent, layout.grid_side))
    if args.dump_trace:
        save_trace(result.trace, out / "trace")
        outputs["trace"] = "trace/manifest.json"
    if result.controller is not None and result.controller.plans:
        plans = [plan_summary(p) for _, p in sorted(result.controller.plans.items())]
        write_json(out / "plans.json", plans)
        outputs["plans"] = "plans.json"
    timings = dict(result.timings, write_s=time.perf_counter() - t0)

    manifest = {
        "command": "run",
        "version": __version__,
        "mode": cfg.run.mode,
        "config": cfg.snapshot(),
        "seeds": {
            "backbone": cfg.backbone.seed,
            "sampler": cfg.sampler.seed,
            "conditions": cfg.run.condition_seed,
        },
        "layout": layout.to_json(),
        "outputs": outputs,
        "latent_sha256": hashlib.sha256(result.latent.values.tobytes()).hexdigest(),
        "timings": timings,
    }
    write_json(out / "manifest.json", manifest)
    print(f"{cfg.run.mode} run written to {out}")
    return EXIT_OK


def _step_points(args: argparse.Namespace, num_steps: int) -> list[int]:
    lo = 0 if args.start is None else args.start
    hi = num_steps if args.stop is None else args.stop
    if args.stride < 1 or not 0 <= lo <= hi <= num_steps:
        raise UsageError(f"invalid sweep {lo}..{hi} stride {args.stride} for {num_steps} steps")
    points = list(range(lo, hi + 1, args.stride))
    if points[-1] != hi:
        points.append(hi)
    return points


def cmd_perturb(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, {"sampler.seed": args.seed, "sampler.num_steps": args.steps})
    layout = cfg.layout.build()
    weights = init_backbone(cfg.backbone)
    conditions = Conditions.random(layout, cfg.backbone.vocab_size, cfg.run.condition_seed)
    out = Path(args.out or f"runs/perturb-{args.kind}")
    reports = []
    if args.kind == "steps":
        points = _step_points(args, cfg.sampler.num_steps)
        reports.append(step_sweep(layout, weights, cfg.sampler, conditions, points, args.single_step))
    else:
        directions = ["top_down", "bottom_up"] if args.direction == "both" else [args.direction]
        for d in directions:
            reports.append(layer_sweep(layout, weights, cfg.sampler, conditions, d))

    curves = {}
    for rep in reports:
        name = f"{rep.parameter}.csv"
        atomic_write(out / name, curve_csv(rep.curve))
        curves[rep.parameter] = {
            "file": name,
            "runs": [f"{rep.parameter}={p}" for p, _ in rep.curve],
        }
        for p, s in rep.curve:
            print(f"{rep.parameter}\t{p}\t{s:.6f}")
    manifest = {
        "command": "perturb",
        "version": __version__,
        "kind": args.kind,
        "single_step": bool(getattr(args, "single_step", False)),
        "config": cfg.snapshot(),
        "layout": layout.to_json(),
        "baseline_id": "baseline",
        "curves": curves,
    }
    write_json(out / "manifest.json", manifest)
    return EXIT_OK


def cmd_dump_attn(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise UsageError(f"no run manifest in {run_dir}")
    manifest = read_json(manifest_path)
    if "trace" not in manifest.get("outputs", {}):
        raise UsageError(f"run {run_dir} has no attention trace (re-run with --dump-trace)")
    cfg = config_from_snapshot(manifest["config"])
    layout = cfg.layout.build()
    num_layers = cfg.backbone.num_layers
    layers = tuple(args.layers) if args.layers else cfg.saas.vital(num_layers)
    if min(layers) < 0 or max(layers) >= num_layers:
        raise UsageError(f"layers {layers} outside [0, {num_layers})")
    saas_cfg = replace(cfg.saas, vital_layers=layers)
    if args.tau is not None:
        saas_cfg = replace(saas_cfg, tau=args.tau)

    trace = load_trace(run_dir / "trace", steps=[args.step])
    attention = trace.step(args.step)
    if not attention:
        raise UsageError(f"trace has no records for step {args.step}")
    plan = build_plan(attention, layout, saas_cfg, args.step)
    out = Path(args.out or run_dir / "dumps" / f"step{args.step:03d}")
    base = {"step": args.step, "layer_set": list(layers)}

    if plan.image_map is not None:
        normed, degenerate = minmax_normalize(plan.image_map)
        write_map_pgm(out / "image_map.pgm", normed)
        write_json(out / "image_map.json", dict(base, subject="image", instruction=None, tau=None,
                                                 alpha=None, degenerate_flags={"normalize": degenerate}))
    for e, span in zip(plan.entries, layout.sub_instructions):
        i = e.mask.instruction
        normed, degenerate = minmax_normalize(plan.maps[span.start : span.stop].sum(axis=0))
        sidecar = dict(base, instruction=i, tau=e.tau, alpha=e.alpha,
                       degenerate_flags={"normalize": degenerate, "skipped": e.skipped})
        write_map_pgm(out / f"instruction{i}_map.pgm", normed)
        write_json(out / f"instruction{i}_map.json", dict(sidecar, subject="instruction_map"))
        write_mask_pgm(out / f"instruction{i}_mask.pgm", e.mask.grid)
        write_json(out / f"instruction{i}_mask.json", dict(sidecar, subject="instruction_mask"))
    if args.tokens:
        for j in range(layout.num_conditions):
            normed, degenerate = minmax_normalize(plan.maps[j])
            write_map_pgm(out / f"token{j:03d}.pgm", normed)
            write_json(out / f"token{j:03d}.json", dict(base, subject=f"token{j}", instruction=None,
                                                        tau=None, alpha=None,
                                                        degenerate_flags={"normalize": degenerate}))
    print(f"dumped step {args.step} maps to {out}")
    return EXIT_OK


def bench_report(cfg: RunConfig, repeats: int) -> dict:
    if repeats < 3:
        raise UsageError("bench needs --repeats >= 3")
    timings = {"baseline": [], "saas": []}
    for _ in range(repeats):
        for mode in ("baseline", "saas"):
            run_cfg = replace(cfg, run=replace(cfg.run, mode=mode))
            t0 = time.perf_counter()
            execute_run(run_cfg)
            timings[mode].append(time.perf_counter() - t0)
    base = statistics.median(timings["baseline"])
    saas = statistics.median(timings["saas"])
    return {
        "repeats": repeats,
        "baseline_median_s": base,
        "saas_median_s": saas,
        "incremental_expense_pct": 100.0 * (saas - base) / base,
        "baseline_s": timings["baseline"],
        "saas_s": timings["saas"],
    }


def format_bench(report: dict) -> str:
    ref_base, ref_saas, ref_pct = REFERENCE_LATENCY
    lines = [
        f"# reference (full-scale model, published): {ref_base} s -> {ref_saas} s, +{ref_pct}% latency",
        f"repeats                  {report['repeats']}",
        f"baseline median (s)      {report['baseline_median_s']:.4f}",
        f"saas median (s)          {report['saas_median_s']:.4f}",
        f"incremental expense (%)  {report['incremental_expense_pct']:+.2f}",
    ]
    return "\n".join(lines)


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    report = bench_report(cfg, args.repeats)
    print(format_bench(report))
    if args.json:
        atomic_write(args.json, canonical_json(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="saas", description="Self-adaptive attention scaling on a toy flow-matching transformer.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="sample one latent (baseline, saas or fixed-factor mode)")
    r.add_argument("--config", help="key = value config file")
    r.add_argument("--mode", choices=["baseline", "saas", "fixed"])
    r.add_argument("--seed", type=int, help="sampler (noise) seed")
    r.add_argument("--weights-seed", type=int, help="backbone weight seed")
    r.add_argument("--steps", type=int, help="number of denoising steps")
    r.add_argument("--factor", type=float, help="scale for --mode fixed (2 and 5 are the ablation presets)")
    r.add_argument("--tau", type=float, help="mask threshold")
    r.add_argument("--threshold", choices=["fixed", "otsu"], help="threshold mode")
    r.add_argument("--outside", choices=["zero", "keep"], help="instruction attention outside the mask")
    r.add_argument("--force-alpha", type=float, help="override every scaling factor")
    r.add_argument("--mask", choices=["all"], help="override every mask ('all' = all-ones)")
    r.add_argument("--dump-trace", action="store_true", help="store every attention matrix")
    r.add_argument("--out", help="output directory")
    r.set_defaults(func=cmd_run)

    q = sub.add_parser("perturb", help="blank-input perturbation sweeps")
    q.add_argument("kind", choices=["steps", "layers"])
    q.add_argument("--config")
    q.add_argument("--seed", type=int)
    q.add_argument("--steps", type=int, help="number of denoising steps")
    q.add_argument("--from", dest="start", type=int)
    q.add_argument("--to", dest="stop", type=int)
    q.add_argument("--stride", type=int, default=5)
    q.add_argument("--single-step", action="store_true", help="perturb only at step s instead of from s on")
    q.add_argument("--direction", choices=["top_down", "bottom_up", "both"], default="both")
    q.add_argument("--out")
    q.set_defaults(func=cmd_perturb)

    d = sub.add_parser("dump-attn", help="export maps and masks of a traced run as PGM")
    d.add_argument("--run", required=True, help="run directory written by 'run --dump-trace'")
    d.add_argument("--step", type=int, required=True)
    d.add_argument("--layers", type=lambda s: [int(t) for t in s.split(",")], help="comma-separated layers")
    d.add_argument("--tau", type=float)
    d.add_argument("--tokens", action="store_true", help="also dump every per-token map")
    d.add_argument("--out")
    d.set_defaults(func=cmd_dump_attn)

    b = sub.add_parser("bench", help="median latency of baseline vs saas")
    b.add_argument("--config")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--json", help="also write the report as JSON")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        print(f"saas: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, InterventionError, FloatingPointError) as exc:
        print(f"saas: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
