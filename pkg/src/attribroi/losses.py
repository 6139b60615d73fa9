"""Task, distillation, and composite losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, NumericDomainError, ShapeError

PROB_CLAMP = 1e-12


@dataclass
class DistillConfig:
    alpha: float = 0.5
    temperature: float = 1.0

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        return self


def cross_entropy(logits, label, class_weights=None):
    """Per-sample ``-w[label] * log softmax(logits)[label]``.

    ``logits`` may be (k,) with an int label, or (n, k) with n labels; the
    result then has shape (n,).
    """
    logits = ad.as_tensor(logits)
    labels = np.atleast_1d(np.asarray(label))
    k = logits.shape[-1]
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= k):
        raise IndexError(f"label {label!r} out of range for {k} classes")
    logp = ad.log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        picked = logp[int(labels[0])]
    else:
        if len(labels) != logits.shape[0]:
            raise ShapeError(f"{len(labels)} labels for {logits.shape[0]} logit rows")
        picked = logp[np.arange(len(labels)), labels]
    loss = ad.scale(picked, -1.0)
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=np.float64)
        if w.shape != (k,) or np.any(w <= 0):
            raise ConfigError(f"class weights must be {k} positive values, got {w}")
        loss = loss * Tensor(w[labels] if logits.ndim > 1 else w[labels[0]])
    return loss


def kl_divergence(p, q, tol=1e-6):
    """``sum p * log(p / q)`` with ``q`` clamped at 1e-12 and ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise NumericDomainError(f"{name} has negative or non-finite entries")
        total = d.sum()
        if abs(total - 1.0) > tol:
            raise NumericDomainError(f"{name} must sum to 1, sums to {total!r}")
    support = p > 0
    qc = np.maximum(q, PROB_CLAMP)
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(qc[support]))))


def distill_loss(teacher_logits, student_logits, temperature=1.0):
    """KL(softmax(teacher / T) || softmax(student / T)) over the last axis.

    The teacher side is treated as a constant; gradients reach only the
    student logits. Batched inputs give one value per row.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, float)
    student = ad.as_tensor(student_logits)
    if t.shape != student.shape:
        raise ShapeError(f"teacher logits {t.shape} and student logits {student.shape} differ")
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    z = t / temperature
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    log_p = np.log(np.maximum(p, PROB_CLAMP))
    log_q = ad.log_softmax(ad.scale(student, 1.0 / temperature), axis=-1)
    entropy_term = np.sum(np.where(p > 0, p * log_p, 0.0), axis=-1)
    cross_term = ad.tsum(log_q * Tensor(p), axis=-1)
    return Tensor(entropy_term) - cross_term


def final_loss(l_model, l_distill, alpha):
    """``l_model * alpha + l_distill * (1 - alpha)``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(l_model, Tensor) or isinstance(l_distill, Tensor):
        return ad.add(ad.scale(l_model, alpha), ad.scale(l_distill, 1.0 - alpha))
    return l_model * alpha + l_distill * (1.0 - alpha)
