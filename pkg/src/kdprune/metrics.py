"""Classification metrics, latency measurement and the Gaussian-blur robustness harness."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .data import LabeledArrays, iterate_batches
from .errors import ConfigError, ContractError
from .tensor import Tensor, no_grad


@dataclass
class EvalReport:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    per_class: list[dict]
    confusion: list[list[int]]
    mean_batch_latency_s: float
    corruption: dict | None = None
    num_samples: int = 0
    latency_note: str = field(default="environment-dependent CPU wall clock; excluded from determinism")

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def scores_from_confusion(cm: np.ndarray) -> dict:
    """Accuracy plus per-class and macro precision/recall/F1 (0 where undefined)."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    total = cm.sum()
    return {
        "accuracy": float(tp.sum() / total) if total else 0.0,
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "support": actual.astype(np.int64),
        "precision_macro": float(precision.mean()),
        "recall_macro": float(recall.mean()),
        "f1_macro": float(f1.mean()),
    }


def gaussian_kernel(sigma: float, kernel_size: int) -> np.ndarray:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"blur kernel size must be odd and positive, got {kernel_size}")
    if sigma <= 0:
        raise ConfigError(f"blur sigma must be positive, got {sigma}")
    r = np.arange(kernel_size, dtype=np.float64) - kernel_size // 2
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur(batch, sigma: float = 1.5, kernel_size: int = 5):
    """Depthwise Gaussian blur with reflect padding; returns the same type as ``batch``."""
    is_tensor = isinstance(batch, Tensor)
    x = batch.data if is_tensor else np.asarray(batch)
    if x.ndim != 4:
        raise ConfigError(f"gaussian_blur expects [B, C, H, W], got {x.shape}")
    kernel = gaussian_kernel(sigma, kernel_size).astype(x.dtype)
    pad = kernel_size // 2
    c = x.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect") if pad else x
    weight = np.broadcast_to(kernel, (c, 1, kernel_size, kernel_size)).copy()
    with no_grad():
        out = ops.conv2d(Tensor(xp), Tensor(weight), groups=c).data
    return Tensor(out) if is_tensor else out


def corruption_descriptor(blur_sigma: float | None, blur_kernel: int = 5) -> dict | None:
    if blur_sigma is None:
        return None
    return {"type": "gaussian_blur", "sigma": float(blur_sigma), "kernel": int(blur_kernel)}


def predict(model, data: LabeledArrays, batch_size: int = 32, corruption: dict | None = None):
    """Predicted labels and per-batch forward latencies (seconds)."""
    model.eval()
    preds, latencies = [], []
    with no_grad():
        for xb, _ in iterate_batches(data, batch_size):
            if corruption is not None:
                xb = gaussian_blur(xb, corruption["sigma"], corruption["kernel"])
            t0 = time.perf_counter()
            logits = model(Tensor(xb))
            latencies.append(time.perf_counter() - t0)
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds), latencies


def evaluate(model, data: LabeledArrays, batch_size: int = 32, corruption: dict | None = None,
             warmup: int = 3) -> EvalReport:
    """Accuracy, macro metrics, confusion matrix and mean per-batch latency.

    ``warmup`` untimed forward passes on the first batch precede the timed run.
    Corruption (Gaussian blur) is applied to the already-normalised inputs.
    """
    if len(data) == 0:
        raise ContractError("evaluate() needs a non-empty dataset")
    num_classes = model.spec.num_classes if hasattr(model, "spec") else int(data.labels.max()) + 1
    model.eval()
    with no_grad():
        first = data.images[:batch_size]
        for _ in range(warmup):
            model(Tensor(first))
    preds, latencies = predict(model, data, batch_size, corruption)
    cm = confusion_matrix(data.labels, preds, num_classes)
    s = scores_from_confusion(cm)
    per_class = [
        {"class": i, "precision": float(s["precision"][i]), "recall": float(s["recall"][i]),
         "f1": float(s["f1"][i]), "support": int(s["support"][i])}
        for i in range(num_classes)
    ]
    return EvalReport(
        accuracy=s["accuracy"],
        precision_macro=s["precision_macro"],
        recall_macro=s["recall_macro"],
        f1_macro=s["f1_macro"],
        per_class=per_class,
        confusion=cm.tolist(),
        mean_batch_latency_s=float(np.mean(latencies)),
        corruption=corruption,
        num_samples=len(data),
    )


def accuracy(model, data: LabeledArrays, batch_size: int = 64) -> float:
    if len(data) == 0:
        return float("nan")
    preds, _ = predict(model, data, batch_size)
    return float((preds == data.labels).mean())
