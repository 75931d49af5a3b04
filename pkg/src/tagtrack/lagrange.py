"""Recomposition of interframe fields into Lagrangian fields, and point tracking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from .grid import compose_fields, sample_field


@dataclass
class MotionSequence:
    """Interframe fields ``inf_fields[n]`` (frame n -> n+1) and Lagrangian
    fields ``lag_fields[n]`` (frame 0 -> n+1), both ``(N-1, 2, H, W)``."""

    inf_fields: Tensor
    lag_fields: Tensor

    def __len__(self) -> int:
        return self.inf_fields.shape[0]


def compose_sequence(inf_fields: Tensor | Sequence[Tensor]) -> Tensor:
    """Accumulate interframe displacements into Lagrangian displacements.

    ``lag[0] = inf[0]`` and ``lag[n] = lag[n-1] + inf[n](p + lag[n-1](p))``.
    Any dims between the frame axis and the ``(2, H, W)`` field axes are
    treated as batch dims.
    """
    if len(inf_fields) == 0:
        raise ValueError("need at least one interframe field")
    shape = inf_fields[0].shape
    for f in inf_fields:
        if f.shape != shape:
            raise ValueError(f"grid mismatch: {tuple(f.shape)} vs {tuple(shape)}")
    lag = [inf_fields[0]]
    for inf in inf_fields[1:]:
        lag.append(compose_fields(inf, lag[-1]))
    return torch.stack(lag)


def track_points(lag: Tensor, pts: Tensor) -> Tensor:
    """Move points ``(M, 2)`` through a displacement field ``(2, H, W)``.

    The field is sampled with border clamping, but the returned positions are
    not clamped, so drift out of the grid stays visible.
    """
    pts = torch.as_tensor(pts, dtype=lag.dtype)
    return pts + sample_field(lag, pts)
