"""Teacher-to-student knowledge distillation and plain supervised training."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .data import LabeledArrays, iterate_batches
from .errors import ConfigError
from .metrics import accuracy
from .tensor import Tensor, no_grad


@dataclass
class DistillationConfig:
    temperature: float = 4.0
    alpha: float = 0.5
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.batch_size < 1 or self.epochs < 0 or not self.lr > 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and lr > 0 are required")


def distillation_loss(student_logits: Tensor, teacher_logits, labels, cfg: DistillationConfig) -> Tensor:
    """``(1 - alpha) * CE(Z_S, y) + alpha * T^2 * KL(softmax(Z_T/T) || softmax(Z_S/T))``.

    KL is summed over classes and averaged over the batch. Teacher logits are
    treated as constants.
    """
    t, alpha = cfg.temperature, cfg.alpha
    if not t > 0:
        raise ConfigError(f"temperature must be > 0, got {t}")
    zt = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if zt.shape != student_logits.shape:
        raise ConfigError(f"teacher logits {zt.shape} vs student logits {student_logits.shape}")
    hard = ops.cross_entropy(student_logits, labels)
    soft_targets = ops.softmax(Tensor(zt.astype(student_logits.dtype) / t), axis=1).data
    soft = ops.kl_div(ops.log_softmax(student_logits * (1.0 / t), axis=1), soft_targets) * (t * t)
    return hard * (1.0 - alpha) + soft * alpha


class Adam:
    """Bias-corrected Adam (beta1=0.9, beta2=0.999, eps=1e-8 by default)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0
    epochs_run: int = 0
    checkpoint: str | None = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_accuracy"])
            for i, (loss, acc) in enumerate(zip(self.train_loss, self.val_accuracy), start=1):
                writer.writerow([i, repr(loss), repr(acc)])

    def to_dict(self) -> dict:
        return asdict(self)


def _fit(student, teacher, data: dict[str, LabeledArrays], cfg: DistillationConfig, masks=None,
         log=None) -> TrainReport:
    report = TrainReport()
    start = time.perf_counter()
    train = data["train"]
    val = data.get("val")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(student.parameters(), lr=cfg.lr)
    use_teacher = teacher is not None
    if use_teacher:
        teacher.eval()
    for epoch in range(cfg.epochs):
        student.train()
        total, seen = 0.0, 0
        for xb, yb in iterate_batches(train, cfg.batch_size, rng):
            if use_teacher:
                with no_grad():
                    zt = teacher(Tensor(xb)).data
                zs = student(Tensor(xb))
                loss = distillation_loss(zs, zt, yb, cfg)
            else:
                loss = ops.cross_entropy(student(Tensor(xb)), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if masks:
                from .prune import apply_masks

                apply_masks(student, masks)
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss at epoch {epoch + 1}")
            report.step_losses.append(value)
            total += value * len(yb)
            seen += len(yb)
        report.train_loss.append(total / max(seen, 1))
        report.val_accuracy.append(accuracy(student, val) if val is not None and len(val) else float("nan"))
        report.epochs_run += 1
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss={report.train_loss[-1]:.4f} val_acc={report.val_accuracy[-1]:.4f}")
    student.eval()
    report.seconds = time.perf_counter() - start
    return report


def distill(teacher, student, data: dict[str, LabeledArrays], cfg: DistillationConfig,
            checkpoint_path=None, metadata: dict | None = None, log=None) -> TrainReport:
    """Train ``student`` against a frozen ``teacher`` with :func:`distillation_loss`.

    ``data`` maps partition names to arrays; ``train`` is required, ``val``
    (if present) is scored after every epoch. When ``checkpoint_path`` is set
    the final student is saved there.
    """
    if teacher.spec.num_classes != student.spec.num_classes:
        raise ConfigError(
            f"teacher has {teacher.spec.num_classes} classes but student has {student.spec.num_classes}"
        )
    report = _fit(student, teacher, data, cfg, log=log)
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint

        meta = {"provenance": {"step": "distill", "config": asdict(cfg)}}
        meta.update(metadata or {})
        save_checkpoint(student, checkpoint_path, meta)
        report.checkpoint = str(checkpoint_path)
    return report


def train_supervised(model, data: dict[str, LabeledArrays], cfg: DistillationConfig, masks=None,
                     checkpoint_path=None, metadata: dict | None = None, log=None) -> TrainReport:
    """Cross-entropy training without a teacher (the alpha = 0 path)."""
    report = _fit(model, None, data, cfg, masks=masks, log=log)
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint

        meta = {"provenance": {"step": "train", "config": asdict(cfg)}}
        meta.update(metadata or {})
        save_checkpoint(model, checkpoint_path, meta)
        report.checkpoint = str(checkpoint_path)
    return report
