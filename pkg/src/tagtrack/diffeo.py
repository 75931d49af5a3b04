"""Scaling-and-squaring integration of stationary velocity fields."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
from torch import Tensor

from .grid import compose_fields

DEFAULT_STEPS = 7
MAX_STEP_PX = 0.5


@dataclass(frozen=True)
class SSConfig:
    steps: int = DEFAULT_STEPS

    def __post_init__(self):
        if not 1 <= int(self.steps) <= 12:
            raise ValueError(f"scaling-and-squaring steps must be in [1, 12], got {self.steps}")


def integrate_svf(v: Tensor, steps: int | SSConfig = DEFAULT_STEPS) -> Tensor:
    """Integrate a velocity field ``v`` (..., 2, H, W) to a displacement field.

    Starts from ``v / 2**steps`` and self-composes ``steps`` times. The loop is
    unrolled so autograd differentiates through every composition.
    """
    if isinstance(steps, SSConfig):
        steps = steps.steps
    else:
        steps = SSConfig(steps).steps
    if not torch.isfinite(v).all():
        raise ValueError("velocity field contains non-finite values")
    scale = 2.0 ** steps
    first = v.detach().abs().max().item() / scale if v.numel() else 0.0
    if first > MAX_STEP_PX:
        warnings.warn(
            f"initial scaling step {first:.3f} px exceeds {MAX_STEP_PX} px; "
            "increase the number of squaring steps",
            RuntimeWarning,
            stacklevel=2,
        )
    u = v / scale
    for _ in range(steps):
        u = compose_fields(u, u)
    return u


def invert_svf(v: Tensor, steps: int | SSConfig = DEFAULT_STEPS) -> Tensor:
    """Displacement of the inverse map, obtained by integrating ``-v``."""
    return integrate_svf(-v, steps)
