"""Supervised training plus the two distillation losses (soft-label KD and
attention transfer) that the data-free and partitioned-student pipelines
build on."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, split_batches
from .tensor import DivergenceError, Tape, Tensor
from .zoo import Model


@dataclass
class TrainHyper:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    lr_decay: float = 0.2
    decay_epochs: tuple = ()
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs/batch_size/lr must be positive")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ValueError("lr_decay must be in (0,1]")


@dataclass
class KdHyper:
    temperature: float = 4.0
    alpha: float = 0.9
    beta: float = 0.0

    def validate(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


def evaluate(model: Model, ds: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy with no gradient recording."""
    correct = 0
    for i in range(0, len(ds), batch_size):
        logits = model.forward(Tensor(ds.images[i : i + batch_size])).logits.data
        correct += int((logits.argmax(axis=1) == ds.labels[i : i + batch_size]).sum())
    return correct / len(ds)


def _lr_at(h: TrainHyper, epoch: int) -> float:
    lr = h.lr
    for e in h.decay_epochs:
        if epoch >= e:
            lr *= h.lr_decay
    return lr


def train_supervised(model: Model, ds: Dataset, h: TrainHyper,
                     test_ds: Dataset | None = None, verbose: bool = False):
    """Momentum-SGD training on labels; returns per-epoch history rows."""
    h.validate()
    opt = T.SGD(model.params, h.lr, h.momentum, h.weight_decay)
    history = []
    for epoch in range(h.epochs):
        opt.lr = _lr_at(h, epoch)
        losses, correct, seen = [], 0, 0
        for images, labels in split_batches(ds, h.batch_size, h.seed * 10_000 + epoch):
            with Tape() as tape:
                logits = model.forward(Tensor(images)).logits
                loss = T.softmax_cross_entropy(logits, labels)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                T.backward(tape, loss)
            opt.step()
            losses.append(loss.item())
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            seen += len(labels)
        row = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses)),
               "accuracy": correct / seen}
        history.append(row)
        if test_ds is not None:
            history.append({"epoch": epoch, "split": "test", "loss": float("nan"),
                            "accuracy": evaluate(model, test_ds)})
        if verbose:
            print(f"epoch {epoch}: loss={row['loss']:.4f} acc={row['accuracy']:.3f}")
    return model, history


def kd_loss(student_logits: Tensor, teacher_logits: np.ndarray, labels, h: KdHyper) -> Tensor:
    """alpha * tau^2 * KL(soft teacher || soft student) + (1-alpha) * CE, batch mean."""
    h.validate()
    tau = h.temperature
    t = np.asarray(teacher_logits, dtype=np.float64) / tau
    t -= t.max(axis=1, keepdims=True)
    p_t = np.exp(t)
    p_t /= p_t.sum(axis=1, keepdims=True)
    log_p_t = np.log(p_t)

    log_p_s = T.log_softmax(student_logits * (1.0 / tau))
    # KL(p_t || p_s) = sum p_t (log p_t - log p_s); teacher side is constant
    n = student_logits.shape[0]
    const = float((p_t * log_p_t).sum() / n)
    cross = T.tsum(log_p_s * Tensor(p_t.astype(student_logits.dtype))) * (1.0 / n)
    kl = const - cross
    loss = kl * (h.alpha * tau * tau)
    if h.alpha < 1.0:
        loss = loss + T.softmax_cross_entropy(student_logits, labels) * (1.0 - h.alpha)
    return loss


def attention_map(maps: Tensor) -> Tensor:
    """Channel-summed squared activations, flattened and L2-normalized per sample.

    Samples whose map is identically zero skip normalization (A = 0).
    """
    n = maps.shape[0]
    a = T.reshape(T.tsum(maps * maps, axis=1), (n, -1))
    norm = T.sqrt(T.tsum(a * a, axis=1, keepdims=True))
    return a / _safe_norm(norm)


def _safe_norm(norm: Tensor) -> Tensor:
    # replace exact zeros by 1 without breaking the gradient elsewhere
    mask = (norm.data == 0).astype(norm.dtype)
    return norm + Tensor(mask)


def at_loss(teacher_maps, student_maps: Tensor) -> Tensor:
    """Mean over the batch of the L2 distance between attention maps.

    Channel counts may differ; batch and spatial dims must match.
    """
    t_shape, s_shape = teacher_maps.shape, student_maps.shape
    if t_shape[0] != s_shape[0] or t_shape[2:] != s_shape[2:]:
        raise T.ShapeError(f"at_loss N/H/W mismatch: {t_shape} vs {s_shape}")
    if not isinstance(teacher_maps, Tensor):
        teacher_maps = Tensor(teacher_maps)
    a_t = attention_map(teacher_maps)
    a_s = attention_map(student_maps)
    d = a_t - a_s
    dist = T.sqrt(T.tsum(d * d, axis=1))
    return T.tmean(dist)


@dataclass
class KdResult:
    student: Model
    history: list = field(default_factory=list)


def train_kd(teacher: Model, student: Model, ds: Dataset, h: TrainHyper, k: KdHyper,
             labeled: bool = True, test_ds: Dataset | None = None,
             verbose: bool = False) -> KdResult:
    """Distill a frozen teacher into the student.

    Unlabeled mode forces alpha = 1 (pure soft-target distillation). With
    beta > 0 an attention-transfer term on the final_conv taps is added.
    """
    h.validate()
    k.validate()
    if not labeled:
        k = KdHyper(temperature=k.temperature, alpha=1.0, beta=k.beta)
    teacher.freeze()
    opt = T.SGD(student.params, h.lr, h.momentum, h.weight_decay)
    history = []
    for epoch in range(h.epochs):
        opt.lr = _lr_at(h, epoch)
        losses, correct, seen = [], 0, 0
        for images, labels in split_batches(ds, h.batch_size, h.seed * 10_000 + epoch):
            t_rec = teacher.forward(Tensor(images))  # no tape: teacher is constant
            with Tape() as tape:
                s_rec = student.forward(Tensor(images))
                loss = kd_loss(s_rec.logits, t_rec.logits.data, labels, k)
                if k.beta > 0:
                    loss = loss + at_loss(t_rec.final_conv.data, s_rec.final_conv) * k.beta
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite KD loss at epoch {epoch}")
                T.backward(tape, loss)
            opt.step()
            losses.append(loss.item())
            correct += int((s_rec.logits.data.argmax(axis=1) == labels).sum())
            seen += len(labels)
        row = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses)),
               "accuracy": correct / seen}
        history.append(row)
        if test_ds is not None:
            history.append({"epoch": epoch, "split": "test", "loss": float("nan"),
                            "accuracy": evaluate(student, test_ds)})
        if verbose:
            print(f"kd epoch {epoch}: loss={row['loss']:.4f} acc={row['accuracy']:.3f}")
    return KdResult(student=student, history=history)


def write_history_csv(history: list[dict], path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "split", "loss", "accuracy"])
        w.writeheader()
        for row in history:
            w.writerow(row)
