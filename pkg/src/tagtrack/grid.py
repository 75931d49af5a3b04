"""Dense 2D image / displacement-field operations.

Conventions used throughout the package:

* images are tensors of shape ``(..., H, W)``;
* vector fields are tensors of shape ``(..., 2, H, W)`` in pixel units, with
  channel 0 the column (x) component and channel 1 the row (y) component;
* a displacement field ``u`` represents the map ``p -> p + u(p)``;
* warping is backward: ``warp(I, u)(p) = I(p + u(p))``;
* sampling outside the grid clamps the coordinate to the border.

Every function is written with differentiable torch ops, so autograd supplies
the adjoints used by the training engine.
"""

from __future__ import annotations

import torch
from torch import Tensor

__all__ = [
    "identity_grid",
    "bilinear_sample",
    "sample_field",
    "warp_image",
    "compose_fields",
    "spatial_gradient",
    "jacobian_determinant",
    "count_nonpositive",
]


def identity_grid(height: int, width: int, *, dtype=None, device=None) -> Tensor:
    """Return pixel coordinates as a ``(2, H, W)`` tensor (x first, then y)."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack((xs, ys))


def _interp(src: Tensor, x: Tensor, y: Tensor) -> Tensor:
    """Bilinear lookup of ``src`` (N, C, H, W) at coordinates ``x, y`` (N, P).

    Returns (N, C, P). Coordinates are clamped to the grid before weighting.
    Integer coordinates reproduce pixel values bit-for-bit.
    """
    n, c, h, w = src.shape
    if h < 2 or w < 2:
        raise ValueError("grid must be at least 2x2")
    x = x.clamp(0, w - 1)
    y = y.clamp(0, h - 1)
    x0 = x.detach().floor().clamp(max=w - 2)
    y0 = y.detach().floor().clamp(max=h - 2)
    wx = x - x0
    wy = y - y0
    idx = (y0 * w + x0).long()
    flat = src.reshape(n, c, h * w)

    def take(offset: int) -> Tensor:
        return torch.gather(flat, 2, (idx + offset).unsqueeze(1).expand(n, c, -1))

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = take(0) * (1 - wx) + take(1) * wx
    bottom = take(w) * (1 - wx) + take(w + 1) * wx
    return top * (1 - wy) + bottom * wy


def bilinear_sample(img: Tensor, pts: Tensor) -> Tensor:
    """Sample an ``(H, W)`` image at sub-pixel points.

    Args:
        img: image of shape ``(H, W)``.
        pts: points of shape ``(M, 2)`` as ``(x, y)`` = (column, row).

    Returns:
        Tensor of shape ``(M,)``.
    """
    if img.dim() != 2:
        raise ValueError(f"expected an (H, W) image, got shape {tuple(img.shape)}")
    return sample_field(img.unsqueeze(0), pts)[:, 0]


def sample_field(values: Tensor, pts: Tensor) -> Tensor:
    """Sample a ``(C, H, W)`` grid at points ``(M, 2)``; returns ``(M, C)``."""
    pts = torch.as_tensor(pts, dtype=values.dtype)
    if pts.dim() != 2 or pts.shape[-1] != 2:
        raise ValueError(f"points must have shape (M, 2), got {tuple(pts.shape)}")
    if not torch.isfinite(pts).all():
        raise ValueError("invalid point: non-finite coordinate")
    out = _interp(values.unsqueeze(0), pts[:, 0].unsqueeze(0), pts[:, 1].unsqueeze(0))
    return out[0].transpose(0, 1)


def _check_field(field: Tensor) -> None:
    if field.dim() < 3 or field.shape[-3] != 2:
        raise ValueError(f"vector field must have shape (..., 2, H, W), got {tuple(field.shape)}")


def _resample(src: Tensor, field: Tensor) -> Tensor:
    """Sample ``src`` (..., C, H, W) at ``p + field(p)``; leading dims broadcast."""
    h, w = field.shape[-2:]
    if src.shape[-2:] != (h, w):
        raise ValueError(
            f"shape mismatch: grid {tuple(src.shape[-2:])} vs field {tuple(field.shape[-2:])}"
        )
    lead = torch.broadcast_shapes(src.shape[:-3], field.shape[:-3])
    c = src.shape[-3]
    src = src.expand(*lead, c, h, w).reshape(-1, c, h, w)
    field = field.expand(*lead, 2, h, w).reshape(-1, 2, h * w)
    grid = identity_grid(h, w, dtype=field.dtype, device=field.device).reshape(2, h * w)
    pos = grid + field
    out = _interp(src, pos[:, 0], pos[:, 1])
    return out.reshape(*lead, c, h, w)


def warp_image(img: Tensor, field: Tensor) -> Tensor:
    """Backward-warp ``img`` (..., H, W) with displacement ``field`` (..., 2, H, W)."""
    _check_field(field)
    return _resample(img.unsqueeze(-3), field).squeeze(-3)


def compose_fields(outer: Tensor, inner: Tensor) -> Tensor:
    """Displacement of the map ``p -> q + outer(q)`` with ``q = p + inner(p)``.

    ``outer`` is sampled bilinearly at the positions reached by ``inner``, so
    ``p + result(p)`` is the two-step tracked location of ``p``.
    """
    _check_field(outer)
    _check_field(inner)
    return inner + _resample(outer, inner)


def _forward_diff(f: Tensor, dim: int) -> Tensor:
    d = torch.diff(f, dim=dim)
    pad = torch.zeros_like(f.narrow(dim, 0, 1))
    return torch.cat((d, pad), dim=dim)


def spatial_gradient(field: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Forward differences of a field; the last row/column difference is zero.

    Returns ``(d dx/dx, d dx/dy, d dy/dx, d dy/dy)``, each shaped like one
    component of ``field``.
    """
    _check_field(field)
    u, v = field[..., 0, :, :], field[..., 1, :, :]
    return _forward_diff(u, -1), _forward_diff(u, -2), _forward_diff(v, -1), _forward_diff(v, -2)


def jacobian_determinant(field: Tensor) -> Tensor:
    """Per-pixel ``det(I + grad u)`` with central differences in the interior.

    Borders use one-sided differences. Output has shape ``field.shape[:-3] + (H, W)``.
    """
    _check_field(field)
    u, v = field[..., 0, :, :], field[..., 1, :, :]
    du_dy, du_dx = torch.gradient(u, dim=(-2, -1))
    dv_dy, dv_dx = torch.gradient(v, dim=(-2, -1))
    return (1 + du_dx) * (1 + dv_dy) - du_dy * dv_dx


def count_nonpositive(det: Tensor) -> int:
    """Number of pixels with a non-positive Jacobian determinant."""
    return int((det <= 0).sum().item())
