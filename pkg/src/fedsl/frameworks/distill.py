from __future__ import annotations

import numpy as np

from fedsl.errors import DimensionError, ValidationError
from fedsl.nn_core import log_softmax, softmax_xent


def soft_labels(logits: np.ndarray, temperature: float) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=np.float64) / temperature))


def distill_loss(student_logits, teacher_logits, hard_labels=None, temperature=2.0, weight=0.5):
    """``(1-w) * CE(student, labels) + w * T^2 * KL(teacher_T || student_T)``.

    The CE term is dropped when ``hard_labels`` is None. Returns the loss and
    its exact gradient with respect to ``student_logits``.
    """
    if not temperature > 0:
        raise ValidationError("temperature must be positive")
    if not 0.0 <= weight <= 1.0:
        raise ValidationError("distillation weight must lie in [0, 1]")
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 2:
        raise DimensionError(f"student {s.shape} and teacher {t.shape} logits must match")
    n = s.shape[0]
    log_ps = log_softmax(s / temperature)
    log_pt = log_softmax(t / temperature)
    pt = np.exp(log_pt)
    kl = float(np.sum(pt * (log_pt - log_ps)) / n)
    scale = weight * temperature**2
    loss = scale * kl
    grad = (weight * temperature / n) * (np.exp(log_ps) - pt)
    if hard_labels is not None:
        ce, ce_grad = softmax_xent(s, hard_labels)
        loss += (1.0 - weight) * ce
        grad = grad + (1.0 - weight) * ce_grad
    return loss, grad
