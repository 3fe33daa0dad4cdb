"""Command surface: params, verify, train, bench.

Every run echoes its fully resolved configuration as canonical JSON before
doing any work, and every subcommand is deterministic under --seed (bench
wall-clock fields are measurements and labeled as such). Exit codes:
0 success, 1 verification or training failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import data as data_mod
from .model import (
    VARIANTS,
    ModelConfig,
    build,
    count_flops,
    count_params,
    load_checkpoint,
    save_checkpoint,
    forward as model_forward,
)
from .rng import Rng
from .training import (
    OptimConfig,
    TrainingDiverged,
    export_teacher_logits,
    load_teacher_cache,
    save_teacher_cache,
    train,
    train_teacher,
)
from .verify import FAULT_TARGETS, run_checks

PAPER_REFERENCE = {
    # Published parameter and compute budgets the tables are compared against.
    "tiny": {"params": 23_000_000, "flops": 4.5e9},
    "small": {"params": 34_000_000, "flops": 7.0e9},
    "base": {"params": 57_000_000, "flops": 14.0e9},
}


def _echo_config(args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print(json.dumps(resolved, sort_keys=True, default=str))


def _config_for(args) -> ModelConfig:
    if args.variant == "custom":
        with open(args.config_path) as f:
            return ModelConfig.from_json(f.read())
    factory = VARIANTS[args.variant]
    return factory(num_classes=args.num_classes) if args.num_classes else factory()


def cmd_params(args) -> int:
    cfg = _config_for(args)
    counts = count_params(cfg)
    flops = count_flops(cfg, args.resolution, args.resolution)
    rows = {
        "variant": args.variant,
        "per_stage_params": counts["stages"],
        "stem_params": counts["stem"],
        "downsampler_params": counts["downsamplers"],
        "head_params": counts["head"],
        "total_params": counts["total"],
        "macs": flops["macs"],
        "flops": flops["flops"],
        "resolution": args.resolution,
    }
    ref = PAPER_REFERENCE.get(args.variant)
    if ref:
        rows["reference_params"] = ref["params"]
        rows["params_vs_reference"] = counts["total"] / ref["params"] - 1.0
        rows["reference_flops"] = ref["flops"]
        rows["flops_vs_reference"] = flops["macs"] / ref["flops"] - 1.0
    if args.json:
        print(json.dumps(rows, sort_keys=True))
    else:
        for k, v in rows.items():
            print(f"{k}: {v}")
    return 0


def cmd_verify(args) -> int:
    return run_checks(seed=args.seed, fault=args.break_target)


def _load_dataset(arg: str) -> tuple[list, tuple, tuple]:
    """Returns (images, mean, std) for a --data argument."""
    if arg.startswith("synthetic:"):
        spec = dict(kv.split("=") for kv in arg[len("synthetic:"):].split(",") if kv)
        images = data_mod.synthesize(
            seed=int(spec.get("seed", 0)),
            n=int(spec.get("n", 512)),
            classes=int(spec.get("classes", 10)),
            size=int(spec.get("size", 32)),
        )
        return images, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)
    images = data_mod.read_cifar10_any(arg)
    return images, data_mod.CIFAR10_MEAN, data_mod.CIFAR10_STD


def cmd_train(args) -> int:
    images, mean, std = _load_dataset(args.data)
    train_imgs, eval_imgs = data_mod.split_shuffle(
        images, (args.train_frac, 1.0 - args.train_frac), seed=args.seed
    )
    train_x, train_y = data_mod.as_arrays(train_imgs)
    eval_x, eval_y = data_mod.as_arrays(eval_imgs)
    train_x = data_mod.normalize(train_x, mean, std)
    eval_x = data_mod.normalize(eval_x, mean, std) if len(eval_x) else eval_x

    num_classes = int(max(im.label for im in images)) + 1
    cfg = _config_for(args)
    if cfg.num_classes < num_classes:
        print(f"error: dataset has {num_classes} classes, model head {cfg.num_classes}",
              file=sys.stderr)
        return 1
    model = build(cfg, Rng(args.seed))

    teacher_logits = None
    if args.distill:
        if not args.teacher_cache:
            print("error: --distill requires --teacher-cache", file=sys.stderr)
            return 2
        cache = load_teacher_cache(args.teacher_cache)
        if cache.shape[0] != len(images):
            print(
                f"error: teacher cache holds {cache.shape[0]} rows for "
                f"{len(images)} samples", file=sys.stderr,
            )
            return 1
        teacher_logits = cache[[im.id for im in train_imgs]]

    optim = OptimConfig(lr=args.lr, label_smoothing=args.label_smoothing,
                        clip_norm=None if args.no_clip else 5.0)
    try:
        result = train(
            model,
            model_forward,
            train_x,
            train_y,
            eval_x if len(eval_x) else None,
            eval_y if len(eval_y) else None,
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
            optim=optim,
            alpha=args.alpha,
            teacher_logits=teacher_logits,
            augment=not args.no_augment,
            threads=args.threads,
            report_path=args.report,
            checkpoint_path=args.checkpoint,
            log=print if not args.json else None,
        )
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    summary = {
        "final_eval_acc": result.final_eval_acc,
        "final_train_loss": result.epochs[-1]["train_loss_mean"],
        "epochs": len(result.epochs),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_teacher(args) -> int:
    images, mean, std = _load_dataset(args.data)
    train_imgs, eval_imgs = data_mod.split_shuffle(
        images, (args.train_frac, 1.0 - args.train_frac), seed=args.seed
    )
    train_x, train_y = data_mod.as_arrays(train_imgs)
    eval_x, eval_y = data_mod.as_arrays(eval_imgs)
    train_x = data_mod.normalize(train_x, mean, std)
    eval_x = data_mod.normalize(eval_x, mean, std) if len(eval_x) else eval_x
    num_classes = int(max(im.label for im in images)) + 1

    net, result = train_teacher(
        train_x, train_y,
        eval_x if len(eval_x) else None, eval_y if len(eval_y) else None,
        num_classes=num_classes, seed=args.seed, epochs=args.epochs,
        lr=args.lr, log=print if not args.json else None,
    )
    # Export logits for the full dataset in id order so any split can use it.
    by_id = sorted(images, key=lambda im: im.id)
    all_x, _ = data_mod.as_arrays(by_id)
    all_x = data_mod.normalize(all_x, mean, std)
    logits = export_teacher_logits(net, all_x)
    save_teacher_cache(args.out, logits)
    print(json.dumps({
        "teacher_eval_acc": result.final_eval_acc,
        "cache": args.out,
        "samples": int(logits.shape[0]),
    }, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    report = bench_mod.bench_grouping(
        channels=args.channels, h=args.resolution, w=args.resolution,
        batch=args.batch_size, reps=args.reps, warmup=args.warmup, seed=args.seed,
    )
    if args.json:
        print(json.dumps(report, sort_keys=True))
    else:
        print(f"grouped params:      {report['grouped_params']}")
        print(f"full-width params:   {report['full_params']}")
        print(f"grouped samples/s:   {report['grouped_samples_per_s']:.1f} (measured)")
        print(f"full-width samples/s:{report['full_samples_per_s']:.1f} (measured)")
        print(f"throughput ratio:    {report['throughput_ratio']:.2f}x")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupmamba")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int,
                       default=int(os.environ.get("GROUPMAMBA_THREADS", "1")))
        p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("params", help="parameter and FLOP accounting")
    common(p)
    p.add_argument("--variant", choices=[*VARIANTS, "custom"], default="tiny")
    p.add_argument("--config-path", help="ModelConfig JSON for --variant custom")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--resolution", type=int, default=224)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("verify", help="run the oracle suite")
    common(p)
    p.add_argument("--break", dest="break_target", choices=FAULT_TARGETS, default=None,
                   help="inject a fault to demonstrate the matching check fails")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="train a model on CIFAR-10 binary or synthetic data")
    common(p)
    p.add_argument("--variant", choices=[*VARIANTS, "custom"], default="micro")
    p.add_argument("--config-path")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--data", required=True,
                   help="path to CIFAR-10 .bin (file or dir) or synthetic:seed=0,n=512")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--label-smoothing", type=float, default=0.1)
    p.add_argument("--train-frac", type=float, default=0.9)
    p.add_argument("--distill", action="store_true")
    p.add_argument("--teacher-cache")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--no-clip", action="store_true")
    p.add_argument("--report", help="JSONL per-epoch report path")
    p.add_argument("--checkpoint", help="model checkpoint output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("teacher", help="train the teacher and export its logits cache")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--train-frac", type=float, default=0.9)
    p.add_argument("--out", required=True, help="teacher logits cache path")
    p.set_defaults(func=cmd_teacher)

    p = sub.add_parser("bench", help="grouped vs full-width layer benchmark")
    common(p)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--resolution", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=3)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _echo_config(args)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
