"""Fine-tuning: Adam/AdamW, learning-rate schedules, class weighting,
augmentation, the epoch loop, and binary classification metrics."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, ContractError, NumericalAbort, ShapeError
from .losses import DistillConfig, cross_entropy, distill_loss, final_loss

log = logging.getLogger(__name__)

PLATEAU_THRESHOLD = 1e-8


@dataclass
class AugmentConfig:
    centre_crop: int | None = None
    sharpen: bool = False
    colour_variation: bool = False
    contrast: bool = False

    @property
    def any_enabled(self):
        return bool(self.centre_crop) or self.sharpen or self.colour_variation or self.contrast


@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    schedule: str = "multistep"
    step_interval: int = 10
    step_factor: float = 0.1
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    validation_fraction: float = 0.2
    class_weighting: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    distill: DistillConfig | None = None

    def validate(self):
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"optimizer must be 'adam' or 'adamw', got {self.optimizer!r}")
        if self.schedule not in ("multistep", "plateau"):
            raise ConfigError(f"schedule must be 'multistep' or 'plateau', got {self.schedule!r}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        for name in ("step_factor", "plateau_factor"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if self.step_interval < 1 or self.plateau_patience < 1:
            raise ConfigError("step_interval and plateau_patience must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        if self.distill is not None:
            self.distill.validate()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        aug = AugmentConfig(**d.pop("augment", {}) or {})
        dist = d.pop("distill", None)
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(augment=aug, distill=DistillConfig(**dist) if dist else None,
                   **{k: v for k, v in d.items() if k in names})


# Optimizer settings and epoch counts as reported for the full-size runs.
TRAIN_PRESETS = {
    "vit-teacher": dict(optimizer="adamw", learning_rate=3.6e-5, weight_decay=1e-4,
                        schedule="multistep", step_interval=10, step_factor=0.1, epochs=65),
    "vit-student": dict(optimizer="adamw", learning_rate=3.6e-5, weight_decay=1e-4,
                        schedule="multistep", step_interval=10, step_factor=0.1, epochs=40),
    "tinyvit5m-teacher": dict(optimizer="adam", learning_rate=9.56e-4, weight_decay=1e-4,
                              schedule="plateau", plateau_factor=0.5, plateau_patience=3,
                              epochs=100),
    "tinyvit21m-teacher": dict(optimizer="adam", learning_rate=9.56e-4, weight_decay=1e-4,
                               schedule="plateau", plateau_factor=0.5, plateau_patience=3,
                               epochs=50),
    "student": dict(optimizer="adam", learning_rate=9.56e-4, weight_decay=1e-4,
                    schedule="plateau", plateau_factor=0.5, plateau_patience=3, epochs=40),
}


def train_preset(name, divisor=1, **overrides):
    """Preset training config with epoch-denominated settings divided by ``divisor``."""
    try:
        base = dict(TRAIN_PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown training preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
    if divisor < 1:
        raise ConfigError(f"desk-scale divisor must be >= 1, got {divisor}")
    base["epochs"] = max(1, math.ceil(base["epochs"] / divisor))
    if "step_interval" in base:
        base["step_interval"] = max(1, round(base["step_interval"] / divisor))
    if "plateau_patience" in base:
        base["plateau_patience"] = max(1, round(base["plateau_patience"] / divisor))
    base.update(overrides)
    return TrainConfig(**base)


# optimizers

class Adam:
    """Adam with bias correction; ``decoupled=True`` gives AdamW.

    Plain Adam ignores ``weight_decay``: coupling decay into the loss is not
    supported.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, decoupled=False):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise NumericalAbort(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if self.decoupled and self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def make_optimizer(params, config: TrainConfig):
    return Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay,
                decoupled=config.optimizer == "adamw")


# learning-rate schedules

def multistep_lr(base_lr, epoch, interval, factor):
    return base_lr * factor ** (epoch // interval)


def plateau_lr(base_lr, val_losses, factor, patience, threshold=PLATEAU_THRESHOLD):
    """Replay reduce-on-plateau over the validation-loss history."""
    lr = base_lr
    best = math.inf
    stall = 0
    for loss in val_losses:
        if loss < best - threshold:
            best = loss
            stall = 0
        else:
            stall += 1
            if stall >= patience:
                lr *= factor
                stall = 0
    return lr


def schedule_lr(config: TrainConfig, epoch, val_losses=()):
    """Learning rate for ``epoch`` (0-based) given the losses of earlier epochs."""
    if config.schedule == "multistep":
        return multistep_lr(config.learning_rate, epoch, config.step_interval, config.step_factor)
    return plateau_lr(config.learning_rate, val_losses, config.plateau_factor,
                      config.plateau_patience)


def class_weights(label_counts):
    """Balanced weights ``total / (num_classes * count_c)``."""
    counts = np.asarray(label_counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ConfigError(f"degenerate class: every class needs a positive count, got {counts}")
    return counts.sum() / (len(counts) * counts)


# augmentation

def centre_crop(image, size):
    *_, h, w = image.shape
    if size > h or size > w:
        raise ShapeError(f"crop {size} larger than image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return image[..., top:top + size, left:left + size]


def sharpen(image):
    """Identity plus Laplacian high-pass, clamped borders."""
    pad = [(0, 0)] * (image.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(image, pad, mode="edge")
    return (5 * p[..., 1:-1, 1:-1] - p[..., :-2, 1:-1] - p[..., 2:, 1:-1]
            - p[..., 1:-1, :-2] - p[..., 1:-1, 2:])


def augment(image, config: AugmentConfig, seed):
    """Seeded augmentation pipeline for one (C, H, W) image."""
    rng = np.random.default_rng(seed)
    out = np.asarray(image, dtype=np.float64)
    if not config.any_enabled:
        return out.copy()
    if config.centre_crop:
        out = centre_crop(out, config.centre_crop)
    if config.sharpen:
        out = sharpen(out)
    if config.colour_variation:
        gains = rng.uniform(0.9, 1.1, size=out.shape[0])
        out = out * gains[:, None, None]
    if config.contrast:
        c = rng.uniform(0.8, 1.2)
        mu = out.mean()
        out = c * (out - mu) + mu
    return np.clip(out, 0.0, 1.0)


# metrics

def f1_score(precision, recall):
    return 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)


@dataclass
class Metrics:
    """Binary metrics in percent (positive class = 1), rounded to two decimals."""

    accuracy: float
    precision: float
    recall: float
    specificity: float
    fpr: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int

    @classmethod
    def from_counts(cls, tp, fp, tn, fn):
        total = tp + fp + tn + fn
        if total == 0:
            raise ContractError("metrics need at least one sample")
        acc = 100.0 * (tp + tn) / total
        prec = 100.0 * tp / (tp + fp) if tp + fp else 0.0
        rec = 100.0 * tp / (tp + fn) if tp + fn else 0.0
        spec = round(100.0 * tn / (tn + fp), 2) if tn + fp else 0.0
        return cls(
            accuracy=round(acc, 2), precision=round(prec, 2), recall=round(rec, 2),
            specificity=spec, fpr=round(100.0 - spec, 2) if tn + fp else 0.0,
            f1=round(f1_score(prec, rec), 2), tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn),
        )

    @classmethod
    def from_predictions(cls, y_true, y_pred):
        y_true = np.asarray(y_true)
        y_pred = np.asarray(y_pred)
        if y_true.size == 0:
            raise ContractError("cannot evaluate an empty set")
        tp = int(np.sum((y_pred == 1) & (y_true == 1)))
        fp = int(np.sum((y_pred == 1) & (y_true == 0)))
        tn = int(np.sum((y_pred == 0) & (y_true == 0)))
        fn = int(np.sum((y_pred == 0) & (y_true == 1)))
        return cls.from_counts(tp, fp, tn, fn)

    def to_dict(self):
        return {
            "Accuracy (%)": self.accuracy,
            "Precision (%)": self.precision,
            "Recall/TPR (%)": self.recall,
            "TNR/Specificity (%)": self.specificity,
            "FPR (%)": self.fpr,
            "F1 Score (%)": self.f1,
            "TP": self.tp, "FP": self.fp, "TN": self.tn, "FN": self.fn,
        }


def _eval_images(images, aug: AugmentConfig):
    return centre_crop(images, aug.centre_crop) if aug.centre_crop else images


def evaluate(model, images, labels, augment_config=None):
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ContractError("cannot evaluate an empty set")
    if augment_config is not None:
        images = _eval_images(images, augment_config)
    pred = model.logits(images).argmax(axis=1)
    return Metrics.from_predictions(labels, pred)


# epoch loop

def validation_split(n, fraction, seed):
    """Deterministic (train_idx, val_idx) from a seeded shuffle."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * fraction)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _validate(model, images, labels):
    """Mean unweighted cross-entropy and Metrics from one pass over the set."""
    logits = model.logits(images)
    loss = float(cross_entropy(Tensor(logits), labels).data.mean())
    return loss, Metrics.from_predictions(labels, logits.argmax(axis=1))


def train(model, images, labels, config: TrainConfig, teacher=None,
          val_images=None, val_labels=None, on_epoch=None):
    """Fine-tune ``model`` in place; return ``(model, history)``.

    ``history`` holds one dict per epoch with train/validation loss, the
    learning rate used, and validation metrics. Without explicit validation
    data a seeded split of ``validation_fraction`` is held out.
    """
    config.validate()
    if (teacher is None) != (config.distill is None):
        raise ConfigError("a teacher model is required exactly when distillation is configured")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if len(images) == 0:
        raise ContractError("training set is empty")
    if val_images is None:
        tr, va = validation_split(len(images), config.validation_fraction, config.seed)
        images, val_images = images[tr], images[va]
        labels, val_labels = labels[tr], labels[va]
    else:
        val_images = np.asarray(val_images, dtype=np.float64)
        val_labels = np.asarray(val_labels).astype(np.int64)

    aug = config.augment
    val_images = _eval_images(val_images, aug)
    k = model.config.num_classes
    weights = None
    if config.class_weighting:
        weights = class_weights(np.bincount(labels, minlength=k))

    params = model.named_parameters()
    opt = make_optimizer(params, config)
    rng = np.random.default_rng(config.seed)
    history = []
    val_losses = []
    n = len(images)
    for epoch in range(config.epochs):
        opt.lr = schedule_lr(config, epoch, val_losses)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            yb = labels[idx]
            if aug.any_enabled:
                seeds = rng.integers(0, 2**63 - 1, size=len(idx))
                xb = np.stack([augment(images[i], aug, s) for i, s in zip(idx, seeds)])
            else:
                xb = images[idx]
            opt.zero_grad()
            logits = model.forward(Tensor(xb)).logits
            ce = cross_entropy(logits, yb, weights)
            if weights is not None:
                l_model = ad.scale(ce.sum(), 1.0 / float(weights[yb].sum()))
            else:
                l_model = ce.mean()
            if teacher is not None:
                kl = distill_loss(teacher.logits(xb), logits, config.distill.temperature)
                loss = final_loss(l_model, kl.mean(), config.distill.alpha)
            else:
                loss = l_model
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalAbort(f"non-finite loss {value} at epoch {epoch}")
            loss.backward()
            opt.step()
            total += value * len(idx)
            seen += len(idx)

        val_loss, metrics = _validate(model, val_images, val_labels)
        val_losses.append(val_loss)
        record = {
            "epoch": epoch + 1,
            "lr": opt.lr,
            "train_loss": total / seen,
            "val_loss": val_loss,
            "metrics": metrics.to_dict(),
        }
        history.append(record)
        log.info("epoch %d lr=%.3g train_loss=%.4f val_loss=%.4f val_acc=%.2f",
                 epoch + 1, opt.lr, record["train_loss"], val_loss, metrics.accuracy)
        if on_epoch is not None:
            on_epoch(record)
    return model, history
