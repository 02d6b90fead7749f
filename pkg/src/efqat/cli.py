"""Command-line surface: calibrate, train, eval, cost, plot-data.

Every run writes its resolved configuration, a line-delimited metrics stream
(one JSON object per training step), a summary JSON, and a checkpoint to the
output directory. All errors name the offending file, flag, or layer and
exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, file_hash, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, write_resolved
from .costmodel import network_report
from .data import DataFormatError, ingest_dataset
from .freezing import plan_report
from .model import Model, NetSpec
from .training import (
    ALL_MODES,
    EFQAT_MODES,
    DivergenceError,
    TrainLoop,
    calibrate,
    evaluate,
    make_plan,
)

RATIO_GRID = (0.0, 0.05, 0.1, 0.25, 0.5, 1.0)

ACCURACY_TABLE_HEADER = ["mode", "ratio", "freeze_freq", "seed", "accuracy"]
SPEEDUP_TABLE_HEADER = ["mode", "ratio", "freeze_freq", "seed", "speedup", "backward_seconds"]


class CliError(RuntimeError):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="efqat",
        description="Quantization-aware training with structured weight freezing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_train_flags=True):
        p.add_argument("--config", help="experiment config JSON (default: built-in)")
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--seed", type=int, help="experiment seed")
        if with_train_flags:
            p.add_argument("--mode", choices=ALL_MODES)
            p.add_argument("--ratio", type=float, help="unfrozen ratio in [0, 1]")
            p.add_argument("--freeze-freq", type=float,
                           help="samples between freeze-plan refreshes (inf = never)")
            p.add_argument("--bits-w", type=int, help="weight bit-width")
            p.add_argument("--bits-a", type=int, help="activation bit-width")
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float, help="weight learning rate")
            p.add_argument("--qparam-lr", type=float, help="quantization-parameter learning rate")
            p.add_argument("--qparam-transform", choices=("raw", "log2"))
            p.add_argument("--calib-size", type=int, help="calibration sample count (default 512)")

    p = sub.add_parser("calibrate", help="PTQ: calibrate quantizers and save a checkpoint")
    add_common(p)
    p.add_argument("--init", help="full-precision checkpoint to start from")

    p = sub.add_parser("train", help="train in any mode (fp, fp+1, ptq, qat, efqat-*)")
    add_common(p)
    p.add_argument("--init", help="checkpoint to initialize from (fp or ptq)")
    p.add_argument("--dump-plan", action="store_true",
                   help="write the freeze plan report next to the outputs")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p, with_train_flags=False)
    p.add_argument("checkpoint", help="checkpoint file to evaluate")

    p = sub.add_parser("cost", help="backward-pass cost report over a ratio grid")
    add_common(p)
    p.add_argument("--init", help="checkpoint whose weights drive per-network plans")

    p = sub.add_parser("plot-data", help="collect run summaries into plot tables")
    p.add_argument("--runs", nargs="*", default=[], help="run directories with summary.json")
    p.add_argument("--out", required=True, help="directory for the output tables")
    return parser


def _overrides(args) -> dict:
    mapping = {
        "seed": "seed", "out": "out_dir", "mode": "mode", "ratio": "ratio",
        "freeze_freq": "freeze_freq", "bits_w": "bits_w", "bits_a": "bits_a",
        "epochs": "epochs", "lr": "lr", "qparam_lr": "qparam_lr",
        "qparam_transform": "qparam_transform", "calib_size": "calib_size",
    }
    out = {}
    for attr, key in mapping.items():
        val = getattr(args, attr, None)
        if val is not None:
            out[key] = val
    return out


def _load_into_model(model: Model, path: str, cfg: ExperimentConfig) -> dict:
    net_dict, arrays, meta = load_checkpoint(path)
    if net_dict != cfg.net.to_dict():
        raise CliError(
            f"checkpoint {path} was written for a different network "
            f"(checkpoint net {json.dumps(net_dict, sort_keys=True)[:120]}... "
            f"!= config net)"
        )
    model.load_state_arrays(arrays, transform=cfg.train.qparam_transform)
    meta["_arrays"] = arrays
    return meta


def _save_model(path: Path, model: Model, cfg: ExperimentConfig, meta: dict,
                extra_arrays: dict | None = None) -> str:
    arrays = model.state_arrays()
    if extra_arrays:
        arrays.update(extra_arrays)
    path.parent.mkdir(parents=True, exist_ok=True)
    return save_checkpoint(path, cfg.net.to_dict(), arrays, meta)


def _train_fp(model: Model, cfg: ExperimentConfig, train_ds, epochs: int,
              import_state: dict | None = None) -> TrainLoop:
    fp_cfg = cfg.train
    loop_cfg = type(fp_cfg).from_dict({**fp_cfg.to_dict(), "mode": "fp", "epochs": epochs})
    loop = TrainLoop(model, loop_cfg, quantized=False)
    if import_state:
        loop.load_optimizer_arrays(import_state)
    loop.run(train_ds)
    return loop


def _ensure_quantized_model(model: Model, cfg: ExperimentConfig, train_ds,
                            init: str | None, notes: dict) -> None:
    """Get the model into a calibrated state, whatever the starting point."""
    if init:
        meta = _load_into_model(model, init, cfg)
        notes["parent"] = file_hash(init)
        notes["parent_kind"] = meta.get("kind", "unknown")
        if model.is_calibrated:
            return
    else:
        print(f"no --init checkpoint: training a full-precision model for "
              f"{cfg.train.fp_epochs} epochs first")
        _train_fp(model, cfg, train_ds, cfg.train.fp_epochs)
    used = calibrate(model, train_ds, cfg.train.calib_size, cfg.seed,
                     cfg.train.qparam_transform, cfg.train.batch_size)
    notes["samples_calibrated"] = used
    if used < 2:
        print("warning: calibration set has a single sample; observed ranges "
              "will be narrow", file=sys.stderr)


def cmd_calibrate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    train_ds, eval_ds = ingest_dataset(cfg.dataset)
    model = Model(cfg.net, seed=cfg.seed)
    notes: dict = {"kind": "ptq", "seed": cfg.seed}
    _ensure_quantized_model(model, cfg, train_ds, args.init, notes)
    metrics = evaluate(model, eval_ds, quantized=True, batch_size=cfg.train.batch_size)
    notes["eval_accuracy"] = metrics["accuracy"]
    notes["eval_loss"] = metrics["loss"]
    ckpt = out / "ptq.ckpt"
    digest = _save_model(ckpt, model, cfg, notes)
    print(f"ptq accuracy {metrics['accuracy']:.4f} loss {metrics['loss']:.4f}")
    print(f"wrote {ckpt} ({digest[:12]})")
    return 0


def _write_metrics(path: Path, records) -> None:
    with open(path, "a") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    train_ds, eval_ds = ingest_dataset(cfg.dataset)
    model = Model(cfg.net, seed=cfg.seed)
    mode = cfg.train.mode
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    summary: dict = {
        "mode": mode, "ratio": cfg.train.ratio,
        "freeze_freq": ("inf" if math.isinf(cfg.train.freeze_freq)
                        else cfg.train.freeze_freq),
        "seed": cfg.seed,
    }
    notes: dict = {"kind": mode, "seed": cfg.seed, "mode": mode}

    if mode == "fp":
        loop = _train_fp(model, cfg, train_ds, cfg.train.epochs)
        _write_metrics(metrics_path, loop.records)
        final = evaluate(model, eval_ds, quantized=False, batch_size=cfg.train.batch_size)
        ckpt = out / "fp.ckpt"
        notes["eval_accuracy"] = final["accuracy"]
        digest = _save_model(ckpt, model, cfg, notes, loop.optimizer_arrays())
    elif mode == "fp+1":
        if not args.init:
            raise CliError("--mode fp+1 requires --init with a full-precision checkpoint")
        meta = _load_into_model(model, args.init, cfg)
        notes["parent"] = file_hash(args.init)
        opt_state = meta["_arrays"] if cfg.train.import_optimizer_state else None
        loop = _train_fp(model, cfg, train_ds, cfg.train.epochs, opt_state)
        _write_metrics(metrics_path, loop.records)
        final = evaluate(model, eval_ds, quantized=False, batch_size=cfg.train.batch_size)
        ckpt = out / "fp_plus_1.ckpt"
        notes["eval_accuracy"] = final["accuracy"]
        digest = _save_model(ckpt, model, cfg, notes, loop.optimizer_arrays())
    elif mode == "ptq":
        _ensure_quantized_model(model, cfg, train_ds, args.init, notes)
        final = evaluate(model, eval_ds, quantized=True, batch_size=cfg.train.batch_size)
        summary["ptq_accuracy"] = final["accuracy"]
        ckpt = out / "ptq.ckpt"
        notes["eval_accuracy"] = final["accuracy"]
        digest = _save_model(ckpt, model, cfg, notes)
    else:  # qat / efqat-*
        _ensure_quantized_model(model, cfg, train_ds, args.init, notes)
        ptq_metrics = evaluate(model, eval_ds, quantized=True,
                               batch_size=cfg.train.batch_size)
        summary["ptq_accuracy"] = ptq_metrics["accuracy"]
        plan = make_plan(mode, model, cfg.train.ratio, cfg.train.freeze_freq)
        loop = TrainLoop(model, cfg.train, quantized=True, plan=plan)
        loop.run(train_ds)
        final = evaluate(model, eval_ds, quantized=True, batch_size=cfg.train.batch_size)
        if loop.records:
            loop.records[-1].eval_accuracy = final["accuracy"]
        _write_metrics(metrics_path, loop.records)
        report = network_report(cfg.net.affine_geometry(), loop.plan,
                                cfg.train.batch_size, mode=mode, ratio=cfg.train.ratio)
        summary["speedup"] = report.speedup
        summary["backward_seconds"] = sum(r.backward_seconds for r in loop.records)
        summary["backward_macs_measured"] = loop.counter.backward_total()
        summary["qparam_scale_clamps"] = loop.qparam_opt.clamp_events
        if args.dump_plan:
            plan_path = out / "freeze_plan.json"
            plan_path.write_text(json.dumps(
                plan_report(loop.plan, model.quantized_weights()), indent=2) + "\n")
            print(f"wrote {plan_path}")
        ckpt = out / "final.ckpt"
        notes["eval_accuracy"] = final["accuracy"]
        digest = _save_model(ckpt, model, cfg, notes)

    summary["final_accuracy"] = final["accuracy"]
    summary["final_loss"] = final["loss"]
    summary["checkpoint"] = str(ckpt)
    summary["checkpoint_hash"] = digest
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"mode {mode}: final accuracy {final['accuracy']:.4f} "
          f"loss {final['loss']:.4f}")
    if "ptq_accuracy" in summary and mode not in ("ptq",):
        print(f"ptq accuracy was {summary['ptq_accuracy']:.4f}")
    if "speedup" in summary:
        print(f"matmul-only backward speedup vs dense: {summary['speedup']:.3f}x")
    print(f"wrote {ckpt} ({digest[:12]})")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    train_ds, eval_ds = ingest_dataset(cfg.dataset)
    model = Model(cfg.net, seed=cfg.seed)
    _load_into_model(model, args.checkpoint, cfg)
    metrics = evaluate(model, eval_ds, quantized=model.is_calibrated,
                       batch_size=cfg.train.batch_size)
    print(json.dumps({"checkpoint": args.checkpoint, **metrics}, sort_keys=True))
    return 0


def cmd_cost(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    geometry = cfg.net.affine_geometry()
    model = Model(cfg.net, seed=cfg.seed)
    if args.init:
        _load_into_model(model, args.init, cfg)
    mode = cfg.train.mode if cfg.train.mode in EFQAT_MODES else "efqat-cwpl"
    rows = []
    print(f"backward-pass cost model, batch {cfg.train.batch_size}, plan mode {mode}")
    print(f"{'ratio':>6} {'input-grad':>14} {'weight-grad':>14} {'total':>14} {'speedup':>8}")
    for r in RATIO_GRID:
        plan = make_plan(mode, model, r, math.inf)
        report = network_report(geometry, plan, cfg.train.batch_size, mode=mode, ratio=r)
        rows.append(report.to_dict())
        print(f"{r:6.2f} {report.input_grad_total:14d} {report.weight_grad_total:14d} "
              f"{report.backward_total:14d} {report.speedup:8.3f}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cost_path = out / "cost.json"
    cost_path.write_text(json.dumps(rows, indent=2) + "\n")
    print(f"wrote {cost_path}")
    return 0


def cmd_plot_data(args) -> int:
    summaries = []
    for run_dir in args.runs:
        path = Path(run_dir) / "summary.json"
        if not path.exists():
            raise CliError(f"{run_dir}: no summary.json (was this directory produced "
                           f"by `efqat train`?)")
        summaries.append(json.loads(path.read_text()))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not summaries:
        print("warning: no run summaries given; writing header-only tables",
              file=sys.stderr)

    acc_path = out / "accuracy_vs_ratio.csv"
    with open(acc_path, "w") as fh:
        fh.write(",".join(ACCURACY_TABLE_HEADER) + "\n")
        for s in sorted(summaries, key=lambda s: (s["mode"], s["ratio"], s["seed"])):
            fh.write(f"{s['mode']},{s['ratio']},{s['freeze_freq']},{s['seed']},"
                     f"{s['final_accuracy']}\n")

    speed_path = out / "speedup_vs_ratio.csv"
    with open(speed_path, "w") as fh:
        fh.write(",".join(SPEEDUP_TABLE_HEADER) + "\n")
        for s in sorted(summaries, key=lambda s: (s["mode"], s["ratio"], s["seed"])):
            if "speedup" not in s:
                continue
            fh.write(f"{s['mode']},{s['ratio']},{s['freeze_freq']},{s['seed']},"
                     f"{s['speedup']},{s.get('backward_seconds', '')}\n")
    print(f"wrote {acc_path} and {speed_path}")
    return 0


_COMMANDS = {
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "eval": cmd_eval,
    "cost": cmd_cost,
    "plot-data": cmd_plot_data,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (CliError, ConfigError, DataFormatError, CheckpointError,
            DivergenceError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
