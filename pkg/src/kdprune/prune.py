"""Post-training magnitude pruning with per-layer percentile thresholds.

For each prunable weight tensor W, ``tau = percentile(|W|, p)`` (linear
interpolation between order statistics) and the mask keeps ``|W| >= tau``.
Pruned models keep dense storage; zeros are explicit entries.
"""
from __future__ import annotations

import copy
import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import LabeledArrays
from .errors import ConfigError, ContractError
from .metrics import EvalReport, evaluate

EXCLUDED_SUFFIXES = (".bias", ".gamma", ".beta")
CLASSIFIER_PREFIX = "head."


def default_exclude(name: str) -> bool:
    """Biases, BN affine parameters and the final classifier are never pruned."""
    return name.startswith(CLASSIFIER_PREFIX) or name.endswith(EXCLUDED_SUFFIXES)


@dataclass
class PruneSpec:
    percent: float
    exclude: Callable[[str], bool] = default_exclude
    finetune_epochs: int = 0

    def __post_init__(self):
        if not 0 <= self.percent < 100:
            raise ConfigError(f"pruning percentage must be in [0, 100), got {self.percent}")


@dataclass
class LayerMask:
    mask: np.ndarray
    threshold: float


MaskSet = dict[str, LayerMask]


def percentile_threshold(weights, p: float) -> float:
    """p-th percentile of |weights| with linear interpolation between closest ranks."""
    a = np.sort(np.abs(np.asarray(weights, dtype=np.float64).reshape(-1)))
    if a.size == 0:
        raise ContractError("percentile of an empty weight tensor")
    if not 0 <= p < 100:
        raise ConfigError(f"percentile must be in [0, 100), got {p}")
    rank = p / 100.0 * (a.size - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, a.size - 1)
    return float(a[lo] + (rank - lo) * (a[hi] - a[lo]))


def build_masks(model, spec: PruneSpec) -> MaskSet:
    masks: MaskSet = {}
    for name, param in model.named_parameters():
        if spec.exclude(name):
            continue
        tau = percentile_threshold(param.data, spec.percent)
        # Compare in float64 so the threshold is not rounded away from the weights it came from.
        keep = np.abs(param.data.astype(np.float64)) >= tau
        masks[name] = LayerMask(keep.astype(param.dtype), tau)
    return masks


def apply_masks(model, masks: MaskSet) -> None:
    params = dict(model.named_parameters())
    for name, lm in masks.items():
        p = params[name]
        p.data = p.data * lm.mask


def thresholds(masks: MaskSet) -> dict[str, float]:
    return {name: lm.threshold for name, lm in masks.items()}


def nonzero_params(model) -> int:
    return int(sum(np.count_nonzero(p.data) for p in model.parameters()))


def total_params(model) -> int:
    return int(sum(p.size for p in model.parameters()))


@dataclass
class PruneResult:
    model: object
    masks: MaskSet
    accuracy: float
    inference_time: float
    report: EvalReport | None = None


def prune_model(model, spec: PruneSpec, eval_data: LabeledArrays | None = None, batch_size: int = 32,
                train_data: LabeledArrays | None = None, lr: float = 1e-3, seed: int = 0) -> PruneResult:
    """Mask a deep copy of ``model`` at ``spec.percent`` and evaluate it.

    The input model is never modified. With ``spec.finetune_epochs > 0`` and
    ``train_data`` given, the copy is fine-tuned with masks re-applied after
    every optimizer step.
    """
    pruned = copy.deepcopy(model)
    masks = build_masks(pruned, spec)
    apply_masks(pruned, masks)
    if spec.finetune_epochs > 0 and train_data is not None:
        from .distill import DistillationConfig, train_supervised

        cfg = DistillationConfig(epochs=spec.finetune_epochs, lr=lr, batch_size=batch_size, seed=seed, alpha=0.0)
        train_supervised(pruned, {"train": train_data}, cfg, masks=masks)
    report = None
    acc, latency = float("nan"), float("nan")
    if eval_data is not None:
        if len(eval_data) == 0:
            raise ContractError("prune_model needs non-empty evaluation data")
        report = evaluate(pruned, eval_data, batch_size)
        acc, latency = report.accuracy, report.mean_batch_latency_s
    return PruneResult(pruned, masks, acc, latency, report)


SWEEP_COLUMNS = (
    "p_percent", "accuracy", "precision_macro", "recall_macro", "f1_macro",
    "mean_batch_latency_s", "global_sparsity", "nonzero_params",
)


@dataclass
class SweepRow:
    p_percent: float
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    mean_batch_latency_s: float
    global_sparsity: float
    nonzero_params: int


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SWEEP_COLUMNS)
            for r in self.rows:
                writer.writerow([getattr(r, c) for c in SWEEP_COLUMNS])

    @classmethod
    def from_csv(cls, path) -> "SweepResult":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(SweepRow(**{c: (int(rec[c]) if c == "nonzero_params" else float(rec[c])) for c in SWEEP_COLUMNS}))
        return cls(rows)


DEFAULT_GRID = tuple(range(0, 100, 5)) + (99,)


def parse_grid(text: str) -> list[float]:
    """``"0:95:5,99"`` -> [0, 5, ..., 95, 99] (ranges are inclusive)."""
    values: list[float] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            fields = [float(v) for v in part.split(":")]
            if len(fields) not in (2, 3):
                raise ConfigError(f"bad grid range {part!r}")
            start, stop = fields[0], fields[1]
            step = fields[2] if len(fields) == 3 else 1.0
            if step <= 0:
                raise ConfigError(f"grid step must be positive in {part!r}")
            n = int(math.floor((stop - start) / step + 1e-9))
            values.extend(start + i * step for i in range(n + 1))
        else:
            values.append(float(part))
    values = sorted(set(values))
    for v in values:
        if not 0 <= v < 100:
            raise ConfigError(f"grid value {v} outside [0, 100)")
    return values


def sweep_prune(model, eval_data: LabeledArrays, p_values: Sequence[float] = DEFAULT_GRID,
                batch_size: int = 32, progress: Callable[[SweepRow], None] | None = None) -> SweepResult:
    """Evaluate pruning at every rate in ``p_values``, always starting from the same unpruned model."""
    p_values = list(p_values)
    if p_values != sorted(p_values):
        raise ConfigError("p_values must be sorted ascending")
    total = total_params(model)
    result = SweepResult()
    for p in p_values:
        res = prune_model(model, PruneSpec(p), eval_data, batch_size)
        nz = nonzero_params(res.model)
        r = res.report
        row = SweepRow(float(p), r.accuracy, r.precision_macro, r.recall_macro, r.f1_macro,
                       r.mean_batch_latency_s, 1.0 - nz / total, nz)
        result.rows.append(row)
        if progress is not None:
            progress(row)
    return result


def select_optimal(sweep: SweepResult, delta: float = 1.0) -> float:
    """Largest p whose accuracy is within ``delta`` points of the p=0 accuracy.

    Accuracies in the sweep are fractions; ``delta`` is in percentage points.
    This selection rule is a stand-in: the source results do not state theirs.
    """
    if not sweep.rows:
        raise ContractError("select_optimal needs a non-empty sweep")
    base = [r for r in sweep.rows if r.p_percent == 0]
    if not base:
        raise ContractError("sweep must contain p=0")
    floor = 100.0 * base[0].accuracy - delta
    return max(r.p_percent for r in sweep.rows if 100.0 * r.accuracy >= floor - 1e-12)
