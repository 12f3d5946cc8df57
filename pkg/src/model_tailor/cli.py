"""Batch command-line front end wiring the pipeline end to end.

Commands are idempotent and deterministic given a scenario config and seed:
re-running one overwrites its outputs with identical bytes. Exit codes:
0 success, 2 validation error, 3 numerical error, 4 file/format error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .checkpoint import (
    checkpoint_hash,
    load_checkpoint,
    load_task_patch,
    save_checkpoint,
    save_task_patch,
)
from .errors import ModelTailorError, ValidationError
from .hessian import load_calibration_file, save_calibration_file
from .multitask import stitch, stitch_report
from .scenario import MODE_ALIASES, ScenarioConfig, load_scenario, reseeded
from .tailor import FusionConfig, tailor_model
from .toymodel import capture_activations, evaluate, init_model, train


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(args) -> ScenarioConfig:
    cfg = load_scenario(getattr(args, "config", None))
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = reseeded(cfg, seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    base = init_model(cfg.spec())
    written = []

    pre_res = train(base, cfg.dataset(cfg.origin_task), cfg.pretrain)
    pre_path = out / "pre.mtw"
    save_checkpoint(pre_res.checkpoint, pre_path)
    written.append(pre_path)
    curve = out / "curve_pre.json"
    _dump_json(
        {
            "schema_version": 1,
            "stage": "pretrain",
            "task": cfg.origin_task,
            "epoch_losses": pre_res.epoch_losses,
        },
        curve,
    )
    written.append(curve)

    finetune = cfg.finetune
    if args.epochs is not None:
        from dataclasses import replace

        finetune = replace(finetune, epochs=args.epochs)
    for task in cfg.target_tasks:
        res = train(pre_res.checkpoint, cfg.dataset(task), finetune)
        sft_path = out / f"sft_{task}.mtw"
        save_checkpoint(res.checkpoint, sft_path)
        written.append(sft_path)
        curve = out / f"curve_sft_{task}.json"
        _dump_json(
            {
                "schema_version": 1,
                "stage": "finetune",
                "task": task,
                "epoch_losses": res.epoch_losses,
            },
            curve,
        )
        written.append(curve)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    ckpt = load_checkpoint(args.ckpt)
    task = args.task or cfg.target_tasks[0]
    n = args.n if args.n is not None else cfg.calib_samples
    widest = max((arr.shape[1] for arr in ckpt.tensors.values()), default=0)
    if n < widest:
        print(
            f"warning: {n} calibration samples is below the widest layer "
            f"column count ({widest}); records may be rank deficient",
            file=sys.stderr,
        )
    records = capture_activations(ckpt, cfg.dataset(task), n)
    path = out / f"calib_{task}.mtw"
    save_calibration_file(
        records,
        path,
        metadata={"task_id": task, "n_calib": str(n), "source_hash": checkpoint_hash(ckpt)},
    )
    print(f"wrote {path}")
    return 0


def _fusion_from_args(args, cfg: ScenarioConfig) -> FusionConfig:
    mode = cfg.fusion.mode
    if args.mode is not None:
        mode = MODE_ALIASES[args.mode]
    return FusionConfig(
        rho=args.rho if args.rho is not None else cfg.fusion.rho,
        omega=args.omega if args.omega is not None else cfg.fusion.omega,
        damp_frac=args.damp_frac if args.damp_frac is not None else cfg.fusion.damp_frac,
        mode=mode,
    )


def _patch_summary(patch, pre=None, bins: int = 10) -> dict:
    layers = {}
    for name, layer in patch.layers.items():
        n = layer.shape[0] * layer.shape[1]
        entry = {
            "parameters": n,
            "retained": int(len(layer.indices)),
            "density": len(layer.indices) / n,
            "decorator_l2": float(np.sqrt(np.sum(layer.decorator**2))),
            "decorator_max": float(np.max(np.abs(layer.decorator))) if len(layer.indices) else 0.0,
        }
        mags = np.abs(layer.decorator)
        counts, edges = np.histogram(mags, bins=bins)
        entry["decorator_histogram"] = {
            "counts": [int(c) for c in counts],
            "edges": [float(e) for e in edges],
        }
        if pre is not None:
            if name not in pre.tensors:
                raise ValidationError(f"patch layer {name!r} missing from --pre checkpoint")
            pre_vals = pre.tensors[name].ravel()[layer.indices]
            scores = np.abs(layer.sft_values - pre_vals)
            counts, edges = np.histogram(scores, bins=bins)
            entry["salience_histogram"] = {
                "counts": [int(c) for c in counts],
                "edges": [float(e) for e in edges],
            }
            entry["salience_max"] = float(np.max(scores)) if len(scores) else 0.0
        layers[name] = entry
    return layers


def cmd_tailor(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    pre = load_checkpoint(args.pre)
    sft = load_checkpoint(args.sft)
    records, _meta = load_calibration_file(args.calib)
    fusion = _fusion_from_args(args, cfg)
    fused, patch = tailor_model(
        pre,
        sft,
        records,
        fusion,
        decorate_patch=not args.no_decorate,
        mask_strategy="random" if args.random_mask else "scored",
        mask_seed=args.seed or 0,
    )
    task = patch.task_id or "task"
    fused_path = out / f"fused_{task}.mtw"
    patch_path = out / f"patch_{task}.mtw"
    save_checkpoint(fused, fused_path)
    save_task_patch(patch, patch_path)
    report = {
        "schema_version": 1,
        "score_definition": metrics.score_definition(),
        "task_id": task,
        "config": patch.config,
        "pre_hash": patch.pre_hash,
        "layers": {
            name: {
                "parameters": entry["parameters"],
                "retained": entry["retained"],
                "density": entry["density"],
                "decorator_l2": entry["decorator_l2"],
                "decorator_max": entry["decorator_max"],
            }
            for name, entry in _patch_summary(patch).items()
        },
    }
    report_path = out / f"report_tailor_{task}.json"
    _dump_json(report, report_path)
    for path in (fused_path, patch_path, report_path):
        print(f"wrote {path}")
    return 0


def cmd_stitch(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    pre = load_checkpoint(args.pre)
    patches = [load_task_patch(p) for p in args.patch]
    stitched = stitch(patches, pre, average=args.average)
    stitched_path = out / "stitched.mtw"
    save_checkpoint(stitched, stitched_path)
    datasets = {}
    for patch in patches:
        if patch.task_id:
            datasets[patch.task_id] = cfg.dataset(patch.task_id)
    datasets[cfg.origin_task] = cfg.dataset(cfg.origin_task)
    report = stitch_report(pre, patches, datasets, average=args.average)
    report_path = out / "report_stitch.json"
    _dump_json(report, report_path)
    print(f"wrote {stitched_path}")
    print(f"wrote {report_path}")
    return 0


def _model_report(ckpt, datasets, origin_tasks, target_tasks) -> metrics.EvalReport:
    scores = {t: evaluate(ckpt, d) for t, d in datasets.items()}
    return metrics.EvalReport(per_task=scores, origin_tasks=origin_tasks, target_tasks=target_tasks)


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    datasets = cfg.datasets()
    origin = [cfg.origin_task]
    targets = list(cfg.target_tasks)
    subject = load_checkpoint(args.ckpt)
    label = Path(args.ckpt).stem
    models = {label: _model_report(subject, datasets, origin, targets)}
    if args.pre:
        models["pre"] = _model_report(load_checkpoint(args.pre), datasets, origin, targets)
    if args.sft:
        models["sft"] = _model_report(load_checkpoint(args.sft), datasets, origin, targets)
    report = {
        "schema_version": metrics.REPORT_SCHEMA_VERSION,
        "score_definition": metrics.score_definition(),
        "metric_definitions": {
            "avg": "arithmetic mean pooled over origin and target tasks",
            "hscore": "harmonic mean of the origin-group and target-group means",
        },
        "origin_tasks": origin,
        "target_tasks": targets,
        "models": {name: rep.to_dict() for name, rep in models.items()},
    }
    if "pre" in models and "sft" in models:
        report["retention"] = metrics.retention(
            models["pre"].group_means(),
            models["sft"].group_means(),
            models[label].group_means(),
        )
    if args.out:
        _dump_json(report, Path(args.out))
        print(f"wrote {args.out}")
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_inspect(args) -> int:
    patch = load_task_patch(args.patch)
    pre = load_checkpoint(args.pre) if args.pre else None
    report = {
        "schema_version": 1,
        "task_id": patch.task_id,
        "config": patch.config,
        "pre_hash": patch.pre_hash,
        "layers": _patch_summary(patch, pre=pre, bins=args.bins),
    }
    if args.out:
        _dump_json(report, Path(args.out))
        print(f"wrote {args.out}")
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    pre = load_checkpoint(args.pre)
    sft = load_checkpoint(args.sft)
    records, _meta = load_calibration_file(args.calib)
    target = sft.metadata.get("task_id") or cfg.target_tasks[0]
    datasets = {cfg.origin_task: cfg.dataset(cfg.origin_task), target: cfg.dataset(target)}
    rhos = [float(v) for v in args.rho_grid.split(",")]
    omegas = [float(v) for v in args.omega_grid.split(",")]
    cells = []
    for rho in rhos:
        for omega in omegas:
            fusion = FusionConfig(
                rho=rho, omega=omega, damp_frac=cfg.fusion.damp_frac, mode=cfg.fusion.mode
            )
            fused, _patch = tailor_model(pre, sft, records, fusion)
            scores = {t: evaluate(fused, d) for t, d in datasets.items()}
            cells.append(
                {
                    "rho": rho,
                    "omega": omega,
                    "scores": scores,
                    "avg": metrics.avg(scores.values()),
                    "hscore": metrics.hscore([scores[cfg.origin_task]], [scores[target]]),
                }
            )
    report = {
        "schema_version": 1,
        "score_definition": metrics.score_definition(),
        "origin_task": cfg.origin_task,
        "target_task": target,
        "cells": cells,
    }
    path = out / "report_ablation.json"
    _dump_json(report, path)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="model-tailor",
        description="Fuse a fine-tuned checkpoint back into its parent via a sparse, compensated patch.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="scenario file or bundled name (default/multitask/fast)")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        if out_required:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="produce pre-trained and fine-tuned checkpoints")
    common(p)
    p.add_argument("--epochs", type=int, default=None, help="override fine-tune epoch count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="capture per-layer activations for a task")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint to run (normally the fine-tuned one)")
    p.add_argument("--task", default=None, help="task id (default: first target)")
    p.add_argument("--n", type=int, default=None, help="number of calibration samples")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("tailor", help="single-task fusion: fused checkpoint + task patch + report")
    common(p)
    p.add_argument("--pre", required=True)
    p.add_argument("--sft", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--rho", type=float, default=None, help="retained fraction of parameters")
    p.add_argument("--omega", type=float, default=None, help="salience weight in the score blend")
    p.add_argument("--damp-frac", type=float, default=None)
    p.add_argument("--mode", choices=["obs", "exact"], default=None)
    p.add_argument("--no-decorate", action="store_true", help="skip compensation (mask-only fusion)")
    p.add_argument("--random-mask", action="store_true", help="random mask baseline for reports")
    p.set_defaults(func=cmd_tailor)

    p = sub.add_parser("stitch", help="multi-task fusion from task patches")
    common(p)
    p.add_argument("--pre", required=True)
    p.add_argument("--patch", action="append", required=True, help="task patch (repeatable)")
    p.add_argument("--average", choices=["all", "selected"], default="all")
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("eval", help="score a checkpoint on the scenario tasks")
    common(p, out_required=False)
    p.add_argument("--ckpt", required=True, help="checkpoint to score")
    p.add_argument("--pre", default=None, help="pre-trained baseline for retention")
    p.add_argument("--sft", default=None, help="fine-tuned baseline for retention")
    p.add_argument("--out", default=None, help="write the JSON report here (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="mask density, score histograms, decorator summary")
    p.add_argument("--patch", required=True)
    p.add_argument("--pre", default=None, help="parent checkpoint, enables salience histograms")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("ablate", help="sweep rho/omega and score each fusion")
    common(p)
    p.add_argument("--pre", required=True)
    p.add_argument("--sft", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--rho-grid", default="0.05,0.1,0.2")
    p.add_argument("--omega-grid", default="0.0,0.5,1.0")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ModelTailorError as exc:
        print(f"error ({exc.code}): {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
