"""Parameter, MAC and FLOP accounting.

MACs come from symbolic shape propagation (no forward pass). Convolutions
count ``Cout * Cin/G * Kh * Kw * H' * W'``, linears ``in * out``, involutions
their two 1x1 kernel-generation convs plus ``K^2 * C * H' * W'`` for the
application. BN, activations, pooling and residual adds count zero.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import LayerRow, Module


@dataclass
class ProfileReport:
    arch: str = ""
    input_size: int = 0
    total_params: int = 0
    trainable_params: int = 0
    nonzero_params: int = 0
    macs: int = 0
    flops: int = 0
    param_bytes: int = 0
    activation_bytes_batch1_estimate: int = 0
    layers: list[LayerRow] = field(default_factory=list)

    def to_dict(self, with_layers: bool = False) -> dict:
        d = asdict(self)
        if with_layers:
            d["layers"] = [asdict(r) for r in self.layers]
        else:
            d.pop("layers")
        return d


def count_params(model: Module) -> ProfileReport:
    params = model.parameters()
    total = int(sum(p.size for p in params))
    trainable = int(sum(p.size for p in params if p.requires_grad))
    nonzero = int(sum(np.count_nonzero(p.data) for p in params))
    spec = getattr(model, "spec", None)
    return ProfileReport(
        arch=getattr(spec, "arch", ""),
        input_size=getattr(spec, "input_size", 0),
        total_params=total,
        trainable_params=trainable,
        nonzero_params=nonzero,
        param_bytes=4 * total,
    )


def count_macs(model: Module, input_size: int | None = None) -> ProfileReport:
    """Full profile: parameter fields plus MACs/FLOPs and per-layer rows at ``input_size``."""
    report = count_params(model)
    if input_size is None:
        input_size = model.spec.input_size
    rows: list[LayerRow] = []
    model.profile((1, 3, input_size, input_size), rows)
    report.input_size = input_size
    report.layers = rows
    report.macs = int(sum(r.macs for r in rows))
    report.flops = 2 * report.macs
    report.activation_bytes_batch1_estimate = int(4 * sum(np.prod(r.out_shape) for r in rows))
    return report


def profile(model: Module, input_size: int | None = None) -> ProfileReport:
    return count_macs(model, input_size)
