"""Central finite-difference validation of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    checked: int
    passed: bool


def grad_check(
    f: Callable[[], Tensor],
    inputs: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = 200,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients of the scalar ``f()`` with central differences.

    ``f`` closes over ``inputs`` and must be deterministic. Inputs should be
    float64 (see :func:`kdprune.tensor.float64_mode`). When an input has more
    than ``max_coords`` elements a seeded random subset of coordinates is probed.
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for x in inputs:
        x.grad = None
        if not x.data.flags.c_contiguous:
            x.data = np.ascontiguousarray(x.data)
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    rng = np.random.default_rng(seed)
    worst_rel = worst_abs = 0.0
    checked = 0
    with no_grad():
        for x, ga in zip(inputs, analytic):
            flat = x.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                numeric = (fp - fm) / (2 * h)
                a = float(ga.reshape(-1)[i])
                abs_err = abs(a - numeric)
                rel = abs_err / max(abs(a), abs(numeric), floor)
                worst_rel = max(worst_rel, rel)
                worst_abs = max(worst_abs, abs_err)
                checked += 1
    for x in inputs:
        x.grad = None
    return GradCheckReport(worst_rel, worst_abs, checked, worst_rel < tolerance)
