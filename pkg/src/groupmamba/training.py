"""Optimizer, schedule, the desk-scale training loop, and the teacher flow.

Training is bit-reproducible: shuffling and augmentation draw from split
streams of one seed, gradients are accumulated over fixed-size batch
shards in shard-index order (so the result does not depend on how many
worker threads execute the shards), and the optimizer update order follows
the model's parameter traversal.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import augment_batch
from .losses import DistillLossInput, cross_entropy, distilled_loss
from .model import GroupMambaModel, forward as model_forward, save_checkpoint
from .rng import Rng
from .tensor import Tensor, conv2d, gradients, matmul, no_grad, parameter, relu, tmean

TEACHER_MAGIC = b"GMTL"

# Fixed shard size for gradient accumulation. Keeping it independent of the
# thread count is what makes results identical at any thread count.
GRAD_SHARD_SIZE = 32


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_frac: float = 0.1
    min_lr_frac: float = 0.01
    clip_norm: float | None = 5.0
    label_smoothing: float = 0.1


class AdamW:
    """Decoupled weight decay Adam; moments kept in parameter dtype."""

    def __init__(self, named_params, config: OptimConfig):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.config = config
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr: float) -> None:
        b1, b2 = self.config.betas
        eps = self.config.eps
        wd = self.config.weight_decay
        self.step_count += 1
        t = self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p.data -= (lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * p.data)).astype(p.dtype)


def cosine_lr(step: int, total_steps: int, config: OptimConfig) -> float:
    """Linear warmup then cosine decay to min_lr_frac * peak."""
    warmup = max(1, round(config.warmup_frac * total_steps))
    peak = config.lr
    floor = config.min_lr_frac * peak
    if step < warmup:
        return peak * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    return math.sqrt(total)


@dataclass
class TrainResult:
    epochs: list[dict] = field(default_factory=list)

    @property
    def final_eval_acc(self) -> float | None:
        return self.epochs[-1]["eval_acc"] if self.epochs else None

    @property
    def final_train_acc(self) -> float | None:
        return self.epochs[-1].get("train_acc") if self.epochs else None

    def write_jsonl(self, path: str) -> None:
        with open(path, "w") as f:
            for rec in self.epochs:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def _shards(batch_idx: np.ndarray):
    for s in range(0, len(batch_idx), GRAD_SHARD_SIZE):
        yield batch_idx[s : s + GRAD_SHARD_SIZE]


def evaluate(model, forward_fn, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
    """Top-1 accuracy of argmax predictions."""
    if len(x) == 0:
        return float("nan")
    hits = 0
    with no_grad():
        for s in range(0, len(x), batch_size):
            logits = forward_fn(model, x[s : s + batch_size])
            hits += int((np.argmax(logits.data, axis=1) == y[s : s + batch_size]).sum())
    return hits / len(x)


def train(
    model,
    forward_fn,
    train_x: np.ndarray,
    train_y: np.ndarray,
    eval_x: np.ndarray | None = None,
    eval_y: np.ndarray | None = None,
    epochs: int = 20,
    batch_size: int = 64,
    seed: int = 0,
    optim: OptimConfig | None = None,
    alpha: float = 1.0,
    teacher_logits: np.ndarray | None = None,
    augment: bool = False,
    threads: int = 1,
    deterministic_reduction: bool = True,
    report_path: str | None = None,
    checkpoint_path: str | None = None,
    log=None,
) -> TrainResult:
    """Train any model exposing named_params() with the given forward_fn.

    With `teacher_logits` (aligned to train_x rows) the objective is the
    distilled loss at weight `alpha`; otherwise plain smoothed
    cross-entropy. alpha = 1 consumes identical randomness and produces a
    bit-identical trajectory to the no-teacher run.
    """
    if len(train_x) == 0:
        raise ValueError("empty training set")
    optim = optim or OptimConfig()
    named = list(model.named_params())
    opt = AdamW(named, optim)
    params = opt.params
    rng = Rng(seed)
    n = len(train_x)
    steps_per_epoch = math.ceil(n / batch_size)
    total_steps = epochs * steps_per_epoch
    result = TrainResult()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    def shard_grads(xb, yb, tb):
        xt = Tensor(np.ascontiguousarray(xb).astype(params[0].dtype))
        logits = forward_fn(model, xt)
        if tb is not None:
            loss = distilled_loss(
                DistillLossInput(logits, tb, yb, alpha), optim.label_smoothing
            )
        else:
            loss = cross_entropy(logits, yb, optim.label_smoothing)
        return float(loss.data), gradients(loss, params)

    try:
        step = 0
        for epoch in range(epochs):
            order = rng.split(f"shuffle{epoch}").permutation(n)
            aug_rng = rng.split(f"augment{epoch}")
            losses = []
            for b in range(steps_per_epoch):
                batch_idx = order[b * batch_size : (b + 1) * batch_size]
                xb_full = train_x[batch_idx]
                if augment:
                    xb_full = augment_batch(xb_full, aug_rng.split(b))
                yb_full = train_y[batch_idx]
                tb_full = teacher_logits[batch_idx] if teacher_logits is not None else None

                shard_slices = [
                    (s, min(s + GRAD_SHARD_SIZE, len(batch_idx)))
                    for s in range(0, len(batch_idx), GRAD_SHARD_SIZE)
                ]
                jobs = [
                    (
                        xb_full[a:b_],
                        yb_full[a:b_],
                        tb_full[a:b_] if tb_full is not None else None,
                    )
                    for a, b_ in shard_slices
                ]
                if pool is not None:
                    outs = list(pool.map(lambda j: shard_grads(*j), jobs))
                else:
                    outs = [shard_grads(*j) for j in jobs]

                # Fixed-order weighted reduction over shards.
                total = len(batch_idx)
                grads = [np.zeros_like(p.data) for p in params]
                loss_val = 0.0
                for (a, b_), (shard_loss, shard_g) in zip(shard_slices, outs):
                    wgt = (b_ - a) / total
                    loss_val += wgt * shard_loss
                    for acc, g in zip(grads, shard_g):
                        acc += wgt * g
                if not math.isfinite(loss_val):
                    raise TrainingDiverged(
                        f"loss became non-finite at epoch {epoch} step {b}"
                    )
                if optim.clip_norm is not None:
                    norm = global_grad_norm(grads)
                    if norm > optim.clip_norm:
                        scale = optim.clip_norm / norm
                        grads = [g * scale for g in grads]
                lr = cosine_lr(step, total_steps, optim)
                opt.step(grads, lr)
                losses.append(loss_val)
                step += 1

            eval_acc = (
                evaluate(model, forward_fn, eval_x, eval_y)
                if eval_x is not None and len(eval_x)
                else None
            )
            rec = {
                "epoch": epoch,
                "lr": cosine_lr(step - 1, total_steps, optim),
                "train_loss_mean": float(np.mean(losses)),
                "train_loss_std": float(np.std(losses)),
                "eval_acc": eval_acc,
            }
            result.epochs.append(rec)
            if log:
                log(json.dumps(rec, sort_keys=True))
    finally:
        if pool is not None:
            pool.shutdown()

    if report_path:
        result.write_jsonl(report_path)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return result


# -- teacher -------------------------------------------------------------------


@dataclass
class TeacherNet:
    """Six-layer convolutional classifier used as the desk-scale teacher.

    Five conv stages (each conv -> channel LayerNorm -> ReLU) and a linear
    head on globally pooled features.
    """

    convs: list
    norms: list
    head_w: Tensor
    head_b: Tensor

    WIDTHS = (32, 48, 64, 96, 128)
    STRIDES = (1, 2, 1, 2, 2)

    @staticmethod
    def create(num_classes: int, rng: Rng, dtype=np.float32) -> "TeacherNet":
        from .layers import Conv2dParams, LayerNormParams

        convs, norms = [], []
        cin = 3
        for i, (cout, stride) in enumerate(zip(TeacherNet.WIDTHS, TeacherNet.STRIDES)):
            convs.append(
                Conv2dParams.create(3, 3, cin, cout, rng.split(f"conv{i}"),
                                    stride=stride, padding=1, dtype=dtype)
            )
            norms.append(LayerNormParams.create(cout, dtype))
            cin = cout
        return TeacherNet(
            convs=convs,
            norms=norms,
            head_w=parameter(rng.split("head").truncated_normal((cin, num_classes)),
                             "head.w", dtype),
            head_b=parameter(np.zeros(num_classes), "head.b", dtype),
        )

    def named_params(self):
        for i, (c, n) in enumerate(zip(self.convs, self.norms)):
            yield from c.params(f"conv{i}.")
            yield from n.params(f"norm{i}.")
        yield "head.w", self.head_w
        yield "head.b", self.head_b


def teacher_forward(net: TeacherNet, images) -> Tensor:
    from .tensor import layer_norm

    x = images if isinstance(images, Tensor) else Tensor(
        np.asarray(images, dtype=net.head_w.dtype)
    )
    for c, n in zip(net.convs, net.norms):
        x = relu(layer_norm(conv2d(x, c.w, c.b, stride=c.stride, padding=c.padding),
                            n.gamma, n.beta))
    pooled = tmean(x, axis=(1, 2))
    return matmul(pooled, net.head_w) + net.head_b


def train_teacher(
    train_x: np.ndarray,
    train_y: np.ndarray,
    eval_x: np.ndarray | None,
    eval_y: np.ndarray | None,
    num_classes: int,
    seed: int = 0,
    epochs: int = 30,
    batch_size: int = 64,
    lr: float = 2e-3,
    augment: bool = True,
    log=None,
) -> tuple[TeacherNet, TrainResult]:
    net = TeacherNet.create(num_classes, Rng(seed).split("teacher"))
    optim = OptimConfig(lr=lr, weight_decay=0.01, label_smoothing=0.0, clip_norm=5.0)
    result = train(
        net, teacher_forward, train_x, train_y, eval_x, eval_y,
        epochs=epochs, batch_size=batch_size, seed=seed + 1,
        optim=optim, augment=augment, log=log,
    )
    return net, result


def export_teacher_logits(net: TeacherNet, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Per-sample logits in dataset order, float32."""
    outs = []
    with no_grad():
        for s in range(0, len(x), batch_size):
            outs.append(teacher_forward(net, x[s : s + batch_size]).data)
    return np.concatenate(outs, axis=0).astype(np.float32) if outs else np.zeros((0, 0), np.float32)


def save_teacher_cache(path: str, logits: np.ndarray) -> None:
    """Header (magic, sample count, class count as u64 LE) then raw floats."""
    logits = np.ascontiguousarray(logits, dtype="<f4")
    with open(path, "wb") as f:
        f.write(TEACHER_MAGIC)
        f.write(struct.pack("<QQ", logits.shape[0], logits.shape[1]))
        f.write(logits.tobytes())


def load_teacher_cache(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != TEACHER_MAGIC:
        raise ValueError(f"{path}: bad teacher cache magic")
    n, k = struct.unpack("<QQ", raw[4:20])
    body = raw[20:]
    if len(body) != n * k * 4:
        raise ValueError(f"{path}: payload length {len(body)} != {n}x{k} floats")
    return np.frombuffer(body, dtype="<f4").reshape(n, k).copy()
