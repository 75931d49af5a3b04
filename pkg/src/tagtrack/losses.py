"""Training objectives.

All losses reduce over the pixel grid by summation and keep any leading batch
dimensions, so ``ncc`` of two ``(B, H, W)`` stacks returns a ``(B,)`` tensor.
Additive constants of the variational bound are dropped.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor

from .grid import spatial_gradient, warp_image

NCC_EPS = 1e-5

LOSS_LOG_COLUMNS = (
    "step",
    "loss_total",
    "loss_kl",
    "loss_recon_fwd",
    "loss_recon_bwd",
    "loss_smooth_inf",
    "loss_smooth_lag",
    "loss_global",
)


@dataclass(frozen=True)
class LossConfig:
    """Scalar hyperparameters of the training objective.

    ``similarity`` selects the likelihood: ``"ncc"`` (Boltzmann / NCC, scaled
    by ``gamma``) or ``"ssd"`` (Gaussian, scaled by ``1 / (2 * sigma2)``).
    """

    lam: float = 10.0
    gamma: float = -0.5
    window: int = 9
    samples: int = 1
    alpha_inf: float = 5.0
    alpha_lag: float = 1.0
    beta: float = 0.5
    sigma2: float = 0.01
    similarity: str = "ncc"

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"NCC window must be odd and >= 3, got {self.window}")
        if self.samples < 1:
            raise ValueError("number of posterior samples must be >= 1")
        if self.gamma > 0:
            raise ValueError("gamma must be negative (or zero to disable the data term)")
        if self.similarity not in ("ncc", "ssd"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        for name in ("lam", "gamma", "alpha_inf", "alpha_lag", "beta", "sigma2"):
            if not torch.isfinite(torch.tensor(float(getattr(self, name)))):
                raise ValueError(f"{name} must be finite")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PosteriorParams:
    """Mean and diagonal log-variance of the SVF posterior, each ``(..., 2, H, W)``."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise ValueError("mu and log_var must have the same shape")
        if self.mu.dim() < 3 or self.mu.shape[-3] != 2:
            raise ValueError(f"posterior must have shape (..., 2, H, W), got {tuple(self.mu.shape)}")

    def __getitem__(self, idx) -> "PosteriorParams":
        return PosteriorParams(self.mu[idx], self.log_var[idx])


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _box_sum(x: Tensor, window: int) -> Tensor:
    """Zero-padded ``window x window`` sums over the last two dims.

    Computed from running sums in float64, then cast back.
    """
    r = window // 2
    c = F.pad(x.double(), (r + 1, r, r + 1, r)).cumsum(-1)
    c = c[..., window:] - c[..., :-window]
    c = c.cumsum(-2)
    return (c[..., window:, :] - c[..., :-window, :]).to(x.dtype)


def ncc(I: Tensor, J: Tensor, window: int = 9) -> Tensor:
    """Sum over pixels of the squared local correlation coefficient.

    Local statistics use the part of the ``window x window`` neighbourhood that
    lies inside the image. Each variance factor is stabilized by ``1e-5``.
    """
    _check_pair(I, J)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"NCC window must be odd, got {window}")
    I, J = torch.broadcast_tensors(I, J)
    h, w = I.shape[-2:]
    count = _box_sum(torch.ones(h, w, dtype=I.dtype, device=I.device), window)
    sI, sJ = _box_sum(I, window), _box_sum(J, window)
    sII, sJJ, sIJ = _box_sum(I * I, window), _box_sum(J * J, window), _box_sum(I * J, window)
    cross = sIJ - sI * sJ / count
    var_i = sII - sI * sI / count
    var_j = sJJ - sJ * sJ / count
    cc = cross * cross / ((var_i + NCC_EPS) * (var_j + NCC_EPS))
    return cc.sum(dim=(-2, -1))


def ssd(I: Tensor, J: Tensor) -> Tensor:
    _check_pair(I, J)
    return ((I - J) ** 2).sum(dim=(-2, -1))


def grid_degree(height: int, width: int, *, dtype=None, device=None) -> Tensor:
    """4-neighbourhood degree of every pixel, shape ``(H, W)``."""
    deg = torch.full((height, width), 4.0, dtype=dtype, device=device)
    deg[0, :] -= 1
    deg[-1, :] -= 1
    deg[:, 0] -= 1
    deg[:, -1] -= 1
    return deg


def laplacian_quadratic(mu: Tensor) -> Tensor:
    """``mu^T L mu`` for the 4-neighbourhood grid Laplacian, summed over components.

    Equals the sum of squared differences over all grid edges.
    """
    dx = torch.diff(mu, dim=-1)
    dy = torch.diff(mu, dim=-2)
    return (dx * dx).sum(dim=(-3, -2, -1)) + (dy * dy).sum(dim=(-3, -2, -1))


def kl_term(post: PosteriorParams, lam: float) -> Tensor:
    """``0.5 * [tr(lam D Sigma) - tr(log Sigma) + mu^T (lam L) mu]``.

    ``Sigma = exp(log_var)`` is diagonal; the graph matrices are never built.
    """
    mu, log_var = post.mu, post.log_var
    if not (torch.isfinite(mu).all() and torch.isfinite(log_var).all()):
        raise ValueError("posterior parameters must be finite")
    deg = grid_degree(*mu.shape[-2:], dtype=mu.dtype, device=mu.device)
    trace = lam * (deg * log_var.exp()).sum(dim=(-3, -2, -1))
    logdet = log_var.sum(dim=(-3, -2, -1))
    return 0.5 * (trace - logdet + lam * laplacian_quadratic(mu))


def similarity(fixed: Tensor, warped: Tensor, cfg: LossConfig) -> Tensor:
    """Negative log-likelihood of ``fixed`` given ``warped`` (constants dropped)."""
    if cfg.similarity == "ssd":
        return ssd(fixed, warped) / (2 * cfg.sigma2)
    return cfg.gamma * ncc(fixed, warped, cfg.window)


def recon_term(fixed: Tensor, moving: Tensor, fields: Tensor, gamma: float, window: int = 9) -> Tensor:
    """``(gamma / K) * sum_k ncc(fixed, moving o fields[k])``.

    ``fields`` stacks the K sampled displacement fields along dim 0.
    """
    warped = warp_image(moving, fields)
    return gamma * ncc(fixed, warped, window).mean(dim=0)


def bidirectional_kl_loss(
    x: Tensor,
    y: Tensor,
    post: PosteriorParams,
    phi: Tensor,
    phi_inv: Tensor,
    cfg: LossConfig,
) -> Tensor:
    """Forward plus backward variational loss of one registration pair.

    ``phi`` / ``phi_inv`` stack K sampled fields along dim 0; ``x`` is warped
    toward ``y`` by ``phi`` and ``y`` toward ``x`` by ``phi_inv``.
    """
    _check_pair(x, y)
    if phi.shape != phi_inv.shape or phi.shape[-2:] != x.shape[-2:]:
        raise ValueError("field shapes do not match the image pair")
    fwd = similarity(y, warp_image(x, phi), cfg).mean(dim=0)
    bwd = similarity(x, warp_image(y, phi_inv), cfg).mean(dim=0)
    return 2 * kl_term(post, cfg.lam) + fwd + bwd


def smooth_loss(field: Tensor) -> Tensor:
    """Sum of squared forward differences of both components in both directions."""
    return sum((g * g).sum(dim=(-2, -1)) for g in spatial_gradient(field))


def global_lagrangian_loss(frames: Tensor, lag_fields: Tensor, window: int = 9) -> Tensor:
    """Negative NCC between the reference frame and each later frame pulled back.

    ``frames`` is ``(N, H, W)`` with ``frames[0]`` the reference; ``lag_fields``
    is ``(N-1, ..., 2, H, W)`` where ``lag_fields[n-1]`` carries reference
    positions to frame ``n``. Extra dims after the first (e.g. posterior samples)
    are averaged.
    """
    n = frames.shape[0]
    if lag_fields.shape[0] != n - 1:
        raise ValueError(f"expected {n - 1} Lagrangian fields, got {lag_fields.shape[0]}")
    return -_global_per_frame(frames, lag_fields, window).sum()


def _global_per_frame(frames: Tensor, lag_fields: Tensor, window: int) -> Tensor:
    later = frames[1:]
    extra = lag_fields.dim() - 4
    later = later.reshape(later.shape[0], *([1] * extra), *later.shape[-2:])
    ref = frames[0]
    warped = warp_image(later, lag_fields)
    per = ncc(ref, warped, window)
    return per.reshape(per.shape[0], -1).mean(dim=1)


@dataclass
class LossBreakdown:
    total: Tensor
    parts: dict = field(default_factory=dict)

    def row(self, step: int) -> dict:
        row = {"step": step, "loss_total": _scalar(self.total)}
        for key in LOSS_LOG_COLUMNS[2:]:
            row[key] = _scalar(self.parts.get(key, 0.0))
        return row


def _scalar(value) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def total_loss(
    frames: Tensor,
    post: PosteriorParams,
    phi: Tensor,
    phi_inv: Tensor | None,
    lag: Tensor | None,
    cfg: LossConfig,
    *,
    pairs: Sequence[tuple[int, int]] | None = None,
    backward_weight: float = 1.0,
    segments: Sequence[tuple[Tensor, Tensor]] | None = None,
    pair_weight: Tensor | None = None,
    lag_weight: Tensor | None = None,
    smooth_fields: tuple[Tensor, Tensor | None, Tensor | None] | None = None,
) -> LossBreakdown:
    """Weighted sum of pairwise variational, smoothness and global terms.

    Args:
        frames: ``(N, H, W)`` sequence.
        post: posterior of every registration pair, batch dim ``P``.
        phi, phi_inv: sampled fields ``(K, P, 2, H, W)`` and their inverses.
        lag: Lagrangian fields ``(N-1, K, 2, H, W)``; may be None when both
            Lagrangian weights are zero.
        pairs: ``(fixed, moving)`` frame indices per pair; defaults to
            consecutive frames ``(n, n+1)``.
        backward_weight: multiplier of the backward reconstruction term.
        segments: ``(frames, lag_fields)`` windows for the global term;
            defaults to the full sequence with ``lag``.
        pair_weight: optional ``(P,)`` weights (0 masks padded pairs).
        lag_weight: optional ``(N-1,)`` weights for Lagrangian terms.
        smooth_fields: ``(phi, phi_inv, lag)`` on which the smoothness
            penalties act; defaults to the sampled fields.
    """
    n = frames.shape[0]
    if pairs is None:
        pairs = [(i, i + 1) for i in range(n - 1)]
    fixed_idx = torch.tensor([p[0] for p in pairs])
    moving_idx = torch.tensor([p[1] for p in pairs])
    fixed, moving = frames[fixed_idx], frames[moving_idx]
    if pair_weight is None:
        pair_weight = torch.ones(len(pairs), dtype=frames.dtype)

    kl = 2 * kl_term(post, cfg.lam)
    fwd = similarity(fixed, warp_image(moving, phi), cfg).mean(dim=0)
    parts = {
        "loss_kl": (pair_weight * kl).sum(),
        "loss_recon_fwd": (pair_weight * fwd).sum(),
    }
    if backward_weight:
        if phi_inv is None:
            raise ValueError("backward term requires inverse fields")
        bwd = similarity(moving, warp_image(fixed, phi_inv), cfg).mean(dim=0)
        parts["loss_recon_bwd"] = (pair_weight * bwd).sum()
    else:
        parts["loss_recon_bwd"] = frames.new_zeros(())
    total = parts["loss_kl"] + parts["loss_recon_fwd"] + backward_weight * parts["loss_recon_bwd"]

    s_phi, s_phi_inv, s_lag = smooth_fields if smooth_fields is not None else (phi, phi_inv, lag)
    if cfg.alpha_inf:
        sm = smooth_loss(s_phi)
        if s_phi_inv is not None:
            sm = sm + smooth_loss(s_phi_inv)
        sm = sm.mean(dim=0)
        parts["loss_smooth_inf"] = (pair_weight * sm).sum()
        total = total + cfg.alpha_inf * parts["loss_smooth_inf"]

    if lag is not None and lag_weight is None:
        lag_weight = torch.ones(lag.shape[0], dtype=frames.dtype)
    if cfg.alpha_lag:
        if s_lag is None:
            raise ValueError("Lagrangian smoothness requires Lagrangian fields")
        sm = smooth_loss(s_lag).reshape(s_lag.shape[0], -1).mean(dim=1)
        parts["loss_smooth_lag"] = (lag_weight * sm).sum()
        total = total + cfg.alpha_lag * parts["loss_smooth_lag"]

    if cfg.beta:
        if segments is None:
            if lag is None:
                raise ValueError("global constraint requires Lagrangian fields")
            per = _global_per_frame(frames, lag, cfg.window)
            glob = -(lag_weight * per).sum()
        else:
            glob = sum(global_lagrangian_loss(f, l, cfg.window) for f, l in segments)
        parts["loss_global"] = glob
        total = total + cfg.beta * glob

    return LossBreakdown(total, parts)
