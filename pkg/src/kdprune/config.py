"""Run configuration: built-in defaults, optional JSON file, CLI overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .distill import DistillationConfig
from .errors import ConfigError


@dataclass
class RunConfig:
    # distillation / training
    temperature: float = 4.0
    alpha: float = 0.5
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    # data
    input_size: int = 224
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_seed: int = 0
    # pruning
    percent: float = 0.0
    finetune_epochs: int = 0
    grid: str = "0:95:5,99"
    select_delta: float = 1.0
    # evaluation
    eval_batch_size: int = 32
    blur_sigma: float = 1.5
    blur_kernel: int = 5
    # model
    hybrid_involution_count: int = 3

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if len(self.split_fractions) not in (2, 3) or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split_fractions must have 2 or 3 entries summing to 1, got {self.split_fractions}")
        if self.input_size < 1 or self.eval_batch_size < 1 or self.finetune_epochs < 0:
            raise ConfigError("input_size and eval_batch_size must be positive, finetune_epochs non-negative")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError(f"blur_kernel must be odd and positive, got {self.blur_kernel}")
        self.distillation()

    def distillation(self) -> DistillationConfig:
        return DistillationConfig(
            temperature=self.temperature, alpha=self.alpha, lr=self.lr,
            batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def valid_keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def resolve(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        """Defaults, then the JSON file at ``path``, then non-None ``overrides``."""
        values: dict = {}
        if path is not None:
            try:
                loaded = json.loads(Path(path).read_text())
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
            if not isinstance(loaded, dict):
                raise ConfigError(f"config {path} must be a JSON object")
            values.update(loaded)
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        unknown = sorted(set(values) - set(cls.valid_keys()))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; valid keys: {', '.join(cls.valid_keys())}")
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
