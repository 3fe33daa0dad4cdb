"""Classification objectives: smoothed cross-entropy and the distilled loss.

The distilled objective mixes the ground-truth cross-entropy with a
cross-entropy against the teacher's hard decision (its argmax class):

    total = alpha * CE(student, y) + (1 - alpha) * CE(student, argmax(teacher))

It is exactly linear in alpha, and alpha = 1 short-circuits to the plain
cross-entropy so the two paths are bit-identical at that endpoint. Teacher
logits are plain arrays; no gradient ever flows to them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, log_softmax, take_labels, tmean


def cross_entropy(logits: Tensor, labels: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Mean smoothed negative log-likelihood over the batch.

    With smoothing s the loss is (1-s) * CE(labels) + s * (mean over all
    classes of the per-class CE), computed from one stable log-softmax.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing {smoothing} outside [0, 1)")
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"label out of range for {k} classes")
    logp = log_softmax(logits)
    nll = -tmean(take_labels(logp, labels))
    if smoothing == 0.0:
        return nll
    uniform = -tmean(logp)
    return (1.0 - smoothing) * nll + smoothing * uniform


@dataclass
class DistillLossInput:
    student_logits: Tensor
    teacher_logits: np.ndarray
    labels: np.ndarray
    alpha: float


def distilled_loss(inp: DistillLossInput, smoothing: float = 0.0) -> Tensor:
    """Convex combination of ground-truth and teacher-hard cross-entropies."""
    if not 0.0 <= inp.alpha <= 1.0:
        raise ValueError(f"alpha {inp.alpha} outside [0, 1]")
    teacher = np.asarray(inp.teacher_logits)
    if teacher.shape != tuple(inp.student_logits.shape):
        raise ValueError(
            f"teacher logits {teacher.shape} != student {tuple(inp.student_logits.shape)}"
        )
    if inp.alpha == 1.0:
        return cross_entropy(inp.student_logits, inp.labels, smoothing)
    y_teacher = np.argmax(teacher, axis=1)  # ties resolve to the lowest index
    ce_true = cross_entropy(inp.student_logits, inp.labels, smoothing)
    ce_teacher = cross_entropy(inp.student_logits, y_teacher, smoothing)
    return inp.alpha * ce_true + (1.0 - inp.alpha) * ce_teacher
