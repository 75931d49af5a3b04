"""Training loop, inference and ablation modes."""

from __future__ import annotations

import copy
import enum
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import io as tio
from .diffeo import SSConfig, integrate_svf
from .lagrange import MotionSequence, compose_sequence
from .losses import LossBreakdown, LossConfig, total_loss
from .net import NetConfig, PosteriorNet, sample_z
from .synth import Sequence, pad_frames

logger = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    A1 = "A1"  # direct reference-to-frame registration, forward term only
    A2 = "A2"  # consecutive frames, forward term only
    A3 = "A3"  # + backward term
    A4 = "A4"  # + interframe smoothness
    A5 = "A5"  # + global constraint over non-overlapping 4-frame windows
    A6 = "A6"  # + global constraint over the full sequence
    FULL = "full"  # + Lagrangian smoothness

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        v = str(value).strip()
        for m in cls:
            if v.lower() in (m.value.lower(), m.name.lower()):
                return m
        raise ValueError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class ModeSpec:
    direct: bool
    backward: bool
    inf_smooth: bool
    global_window: int | None  # None: no global term, 0: full sequence
    lag_smooth: bool


_MODES = {
    Mode.A1: ModeSpec(True, False, False, None, False),
    Mode.A2: ModeSpec(False, False, False, None, False),
    Mode.A3: ModeSpec(False, True, False, None, False),
    Mode.A4: ModeSpec(False, True, True, None, False),
    Mode.A5: ModeSpec(False, True, True, 4, False),
    Mode.A6: ModeSpec(False, True, True, 0, False),
    Mode.FULL: ModeSpec(False, True, True, 0, True),
}


def ablation_modes(mode) -> ModeSpec:
    """Terms switched on by ``mode``; see :class:`ModeSpec`."""
    return _MODES[Mode.parse(mode)]


def masked_loss_config(loss: LossConfig, spec: ModeSpec) -> LossConfig:
    return replace(
        loss,
        alpha_inf=loss.alpha_inf if spec.inf_smooth else 0.0,
        alpha_lag=loss.alpha_lag if spec.lag_smooth else 0.0,
        beta=loss.beta if spec.global_window is not None else 0.0,
    )


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 10
    steps: int | None = None
    seed: int = 0
    mode: str = "full"
    seq_len: int | None = None
    val_every: int | None = None
    augment: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    net: NetConfig = field(default_factory=NetConfig)
    ss: SSConfig = field(default_factory=SSConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        object.__setattr__(self, "mode", Mode.parse(self.mode).value)
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        net = NetConfig(**d.pop("net", {}))
        ss = SSConfig(**d.pop("ss", {}))
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(loss=loss, net=net, ss=ss, **d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class StepOutput:
    loss: LossBreakdown
    inf_fields: Tensor  # (K, P, 2, H, W)
    lag_fields: Tensor  # (N-1, K, 2, H, W)


def augment_sequence(frames: Tensor, k: int) -> Tensor:
    """Dihedral transform ``k`` in [0, 8) of every frame: bit 0 flips columns,
    bit 1 flips rows, bit 2 transposes (square frames only)."""
    if k & 1:
        frames = frames.flip(-1)
    if k & 2:
        frames = frames.flip(-2)
    if k & 4 and frames.shape[-1] == frames.shape[-2]:
        frames = frames.transpose(-1, -2)
    return frames


def sequence_pairs(n: int, spec: ModeSpec) -> list[tuple[int, int]]:
    """``(fixed, moving)`` frame indices of every registration pair."""
    if spec.direct:
        return [(0, k) for k in range(1, n)]
    return [(k, k + 1) for k in range(n - 1)]


def run_sequence(
    model: PosteriorNet,
    frames: Tensor,
    cfg: TrainConfig,
    *,
    generator: torch.Generator | None = None,
    valid: Tensor | None = None,
) -> StepOutput:
    """One pass of the full pipeline over a ``(N, H, W)`` sequence.

    With a ``generator`` the velocity is sampled from the posterior; without
    one the posterior mean is used.
    """
    n, h, w = frames.shape
    if n < 2:
        raise ValueError("a sequence needs at least 2 frames")
    spec = ablation_modes(cfg.mode)
    loss_cfg = masked_loss_config(cfg.loss, spec)
    pairs = sequence_pairs(n, spec)
    fixed = frames[[p[0] for p in pairs]]
    moving = frames[[p[1] for p in pairs]]
    post = model(moving, fixed)
    if generator is not None:
        z = sample_z(post, generator, samples=loss_cfg.samples)
    else:
        z = post.mu.unsqueeze(0)
    k, p = z.shape[:2]
    flat = z.reshape(k * p, 2, h, w)
    phi = integrate_svf(flat, cfg.ss).reshape(k, p, 2, h, w)
    phi_inv = None
    if spec.backward or loss_cfg.alpha_inf:
        phi_inv = integrate_svf(-flat, cfg.ss).reshape(k, p, 2, h, w)

    per_pair = phi.transpose(0, 1)
    lag = per_pair if spec.direct else compose_sequence(per_pair)

    # Smoothness acts on the posterior-mean fields: on sampled fields it is
    # dominated by the sampling noise, which a global sub-pixel shift blurs away.
    smooth_fields = None
    if generator is not None and (loss_cfg.alpha_inf or loss_cfg.alpha_lag):
        mean_phi = integrate_svf(post.mu, cfg.ss).unsqueeze(0)
        mean_inv = integrate_svf(-post.mu, cfg.ss).unsqueeze(0) if loss_cfg.alpha_inf else None
        mean_lag = None
        if loss_cfg.alpha_lag:
            per = mean_phi.transpose(0, 1)
            mean_lag = per if spec.direct else compose_sequence(per)
        smooth_fields = (mean_phi, mean_inv, mean_lag)

    segments = None
    if spec.global_window:
        segments = []
        for start in range(0, n, spec.global_window):
            stop = min(start + spec.global_window, n)
            if stop - start >= 2:
                segments.append((frames[start:stop], compose_sequence(per_pair[start:stop - 1])))

    pair_weight = lag_weight = None
    if valid is not None:
        idx = torch.tensor([q[1] for q in pairs])
        pair_weight = valid[idx].to(frames.dtype)
        lag_weight = valid[1:].to(frames.dtype)

    loss = total_loss(
        frames,
        post,
        phi,
        phi_inv,
        lag,
        loss_cfg,
        pairs=pairs,
        backward_weight=1.0 if spec.backward else 0.0,
        segments=segments,
        pair_weight=pair_weight,
        lag_weight=lag_weight,
        smooth_fields=smooth_fields,
    )
    return StepOutput(loss, phi, lag)


@dataclass
class TrainResult:
    model: PosteriorNet
    config: TrainConfig
    history: list[dict]
    val_history: list[tuple[int, float]]
    best_step: int
    best_val: float


def _check_dataset(seqs: list[Sequence]) -> tuple[int, int]:
    if not seqs:
        raise ValueError("empty dataset")
    shape = seqs[0].shape
    for s in seqs:
        if s.shape != shape:
            raise ValueError(f"inconsistent grids: {s.shape} vs {shape}")
        if len(s) < 2:
            raise ValueError(f"sequence {s.name} has fewer than 2 frames")
    return shape


def _prepare(seqs: list[Sequence], seq_len: int | None) -> list[tuple[Tensor, Tensor | None]]:
    out = []
    for s in seqs:
        frames, valid = s.frames, None
        if seq_len is not None and len(s) < seq_len:
            frames, mask = pad_frames(s.frames, seq_len)
            valid = torch.from_numpy(mask)
        out.append((torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)), valid))
    return out


def validation_loss(model: PosteriorNet, data, cfg: TrainConfig) -> float:
    """Mean deterministic (posterior-mean) loss over prepared sequences."""
    with torch.no_grad():
        vals = [float(run_sequence(model, f, cfg, valid=v).loss.total) for f, v in data]
    return float(np.mean(vals))


def train(
    dataset: list[Sequence],
    cfg: TrainConfig,
    val_set: list[Sequence] | None = None,
) -> TrainResult:
    """Optimize the posterior network, one sequence per step.

    The returned model carries the parameters with the lowest validation loss
    (the training loss on the full training set when no validation set is
    given), evaluated every ``val_every`` steps and at the end.
    """
    shape = _check_dataset(dataset)
    if val_set:
        if _check_dataset(val_set) != shape:
            raise ValueError("validation grid differs from training grid")
    torch.manual_seed(cfg.seed)
    model = PosteriorNet(cfg.net)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)

    train_data = _prepare(dataset, cfg.seq_len)
    val_data = _prepare(val_set, cfg.seq_len) if val_set else train_data
    total_steps = cfg.steps if cfg.steps is not None else cfg.epochs * len(train_data)
    val_every = cfg.val_every or len(train_data)

    history: list[dict] = []
    val_history: list[tuple[int, float]] = []
    best = (float("inf"), 0, copy.deepcopy(model.state_dict()))
    order: list[int] = []
    for step in range(1, total_steps + 1):
        if not order:
            order = list(rng.permutation(len(train_data)))
        frames, valid = train_data[order.pop(0)]
        if cfg.augment:
            frames = augment_sequence(frames, int(rng.integers(8)))
        model.train()
        out = run_sequence(model, frames, cfg, generator=gen, valid=valid)
        opt.zero_grad()
        out.loss.total.backward()
        opt.step()
        history.append(out.loss.row(step))
        if step % val_every == 0 or step == total_steps:
            model.eval()
            val = validation_loss(model, val_data, cfg)
            val_history.append((step, val))
            logger.info("step %d loss %.4f val %.4f", step, history[-1]["loss_total"], val)
            if val < best[0]:
                best = (val, step, copy.deepcopy(model.state_dict()))
    model.load_state_dict(best[2])
    model.eval()
    return TrainResult(model, cfg, history, val_history, best[1], best[0])


def infer_sequence(frames, model: PosteriorNet, cfg: TrainConfig) -> MotionSequence:
    """Posterior-mean interframe and Lagrangian fields of a sequence.

    In direct mode (A1) the network's reference-to-frame fields are both the
    "interframe" output and the Lagrangian fields.
    """
    frames = torch.as_tensor(np.asarray(frames, dtype=np.float32))
    if frames.dim() != 3 or frames.shape[0] < 2:
        raise ValueError("need a (N, H, W) sequence with at least 2 frames")
    model.eval()
    with torch.no_grad():
        spec = ablation_modes(cfg.mode)
        pairs = sequence_pairs(frames.shape[0], spec)
        fixed = frames[[p[0] for p in pairs]]
        moving = frames[[p[1] for p in pairs]]
        mu = model(moving, fixed).mu
        phi = integrate_svf(mu, cfg.ss)
        lag = phi if spec.direct else compose_sequence(phi)
    return MotionSequence(phi, lag)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: PosteriorNet, cfg: TrainConfig, step: int, directory: str | os.PathLike) -> Path:
    """Store parameters as consecutive TGF1 records plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    tensors = []
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": len(blob)})
        blob += tio.encode_tgf(arr.reshape(-1) if arr.ndim > 4 else arr)
    tio.write_bytes(directory / "params.tgf1", bytes(blob))
    manifest = {"format": "tagtrack-checkpoint", "version": 1, "step": step,
                "config": cfg.to_dict(), "tensors": tensors}
    tio.write_json(directory / "checkpoint.json", manifest)
    return directory


def load_checkpoint(directory: str | os.PathLike) -> tuple[PosteriorNet, TrainConfig, int]:
    directory = Path(directory)
    manifest = json.loads((directory / "checkpoint.json").read_text())
    cfg = TrainConfig.from_dict(manifest["config"])
    blob = (directory / "params.tgf1").read_bytes()
    state = {}
    for entry in manifest["tensors"]:
        arr, _ = tio.decode_tgf(blob, entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    model = PosteriorNet(cfg.net)
    model.load_state_dict(state)
    model.eval()
    return model, cfg, int(manifest["step"])


def configure_threads() -> int:
    """Apply ``TAGTRACK_THREADS`` (1 = deterministic test mode)."""
    value = os.environ.get("TAGTRACK_THREADS")
    if value:
        torch.set_num_threads(max(1, int(value)))
    return torch.get_num_threads()
