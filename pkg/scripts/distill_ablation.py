#!/usr/bin/env python3
"""Distillation ablation: alpha = 0.5 hard distillation vs plain CE.

Trains the teacher once on the bundled CIFAR-10 subset, caches its logits,
then runs the micro student with and without the distilled objective under
identical seeds and schedules. Prints a per-seed table and writes one JSON
line per run.

  python scripts/distill_ablation.py --seeds 0 1 2 --epochs 8 --out ablation.jsonl
"""

import argparse
import json
import sys
import time
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "src"))

from groupmamba import data as D
from groupmamba.model import build, forward, micro_config
from groupmamba.rng import Rng
from groupmamba.training import OptimConfig, export_teacher_logits, train, train_teacher


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--data", default=str(REPO / "data" / "cifar10-subset-5000.bin"))
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--teacher-epochs", type=int, default=45)
    parser.add_argument("--lr", type=float, default=4e-3)
    parser.add_argument("--alpha", type=float, default=0.5)
    parser.add_argument("--out", default="ablation.jsonl")
    args = parser.parse_args()

    images = D.read_cifar10_any(args.data)
    train_imgs, eval_imgs = D.split_shuffle(images, (0.9, 0.1), seed=0)
    tx, ty = D.as_arrays(train_imgs)
    ex, ey = D.as_arrays(eval_imgs)
    tx = D.normalize(tx, D.CIFAR10_MEAN, D.CIFAR10_STD)
    ex = D.normalize(ex, D.CIFAR10_MEAN, D.CIFAR10_STD)

    t0 = time.time()
    teacher, teacher_res = train_teacher(
        tx, ty, ex, ey, num_classes=10, seed=0, epochs=args.teacher_epochs, lr=3e-3
    )
    teacher_logits = export_teacher_logits(teacher, tx)
    print(f"teacher: held-out {teacher_res.final_eval_acc:.1%} "
          f"({time.time() - t0:.0f}s)")

    records = []
    for seed in args.seeds:
        row = {"seed": seed}
        for label, logits in (("plain", None), ("distilled", teacher_logits)):
            model = build(micro_config(), Rng(seed))
            res = train(
                model, forward, tx, ty, ex, ey,
                epochs=args.epochs, batch_size=64, seed=seed,
                optim=OptimConfig(lr=args.lr),
                alpha=args.alpha if logits is not None else 1.0,
                teacher_logits=logits, augment=True,
            )
            row[label] = res.final_eval_acc
            row[f"{label}_loss_std"] = res.epochs[-1]["train_loss_std"]
        row["delta"] = row["distilled"] - row["plain"]
        records.append(row)
        print(f"seed {seed}: distilled {row['distilled']:.1%} vs plain "
              f"{row['plain']:.1%} (delta {row['delta']:+.1%})")

    wins = sum(r["delta"] >= 0 for r in records)
    print(f"distilled >= plain in {wins}/{len(records)} seeds")
    with open(args.out, "w") as f:
        f.write(json.dumps({"teacher_eval_acc": teacher_res.final_eval_acc},
                           sort_keys=True) + "\n")
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
