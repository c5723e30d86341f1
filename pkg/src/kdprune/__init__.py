"""Two-step CNN compression: knowledge distillation into compact students, then magnitude pruning.

Everything runs on a small numpy-backed reverse-mode autograd engine.
"""
from __future__ import annotations

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .distill import Adam, DistillationConfig, TrainReport, distill, distillation_loss, train_supervised
from .errors import CheckpointError, ConfigError, ContractError, DataError, DimensionError, KDPruneError
from .metrics import EvalReport, evaluate, gaussian_blur
from .profiler import ProfileReport, count_macs, count_params
from .prune import PruneSpec, prune_model, select_optimal, sweep_prune
from .tensor import Tensor, float64_mode, no_grad
from .zoo import ARCHITECTURES, ModelSpec, build_model

__version__ = "0.1.0"
