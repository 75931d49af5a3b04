"""Synthetic tagged image sequences with analytic ground-truth motion."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from . import io as tio
from .grid import count_nonpositive, jacobian_determinant

MOTIONS = ("translation", "rotation", "annulus")

SEQUENCE_MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "frames", "height", "width", "files"],
    "properties": {
        "format": {"const": "tagtrack-sequence"},
        "version": {"const": 1},
        "frames": {"type": "integer", "minimum": 2},
        "height": {"type": "integer", "minimum": 2},
        "width": {"type": "integer", "minimum": 2},
        "name": {"type": "string"},
        "seed": {"type": ["integer", "null"]},
        "config": {"type": ["object", "null"]},
        "files": {
            "type": "object",
            "required": ["frames"],
            "additionalProperties": {
                "type": "object",
                "required": ["path", "sha256"],
                "properties": {"path": {"type": "string"}, "sha256": {"type": "string"}},
            },
        },
    },
}


@dataclass(frozen=True)
class PhantomConfig:
    """Parameters of one synthetic tagged sequence.

    ``amplitude`` depends on ``motion``: per-frame shift ``(dx, dy)`` in px for
    ``translation``, per-frame angle in radians for ``rotation`` and the peak
    fractional radial contraction for ``annulus``.
    """

    height: int = 64
    width: int = 64
    frames: int = 12
    tag_spacing: float = 6.0
    tag_depth: float = 0.7
    fade_tau: float = 20.0
    fade_floor: float = 0.3
    noise: float = 0.02
    motion: str = "annulus"
    amplitude: float | tuple[float, float] = 0.15
    landmarks: int = 16
    background: float = 0.45

    def __post_init__(self):
        if self.tag_spacing < 3:
            raise ValueError("tag spacing must be >= 3 px")
        if not 0 < self.tag_depth <= 1:
            raise ValueError("tag depth must be in (0, 1]")
        if self.frames < 2:
            raise ValueError("a sequence needs at least 2 frames")
        if self.height < 8 or self.width < 8:
            raise ValueError("grid must be at least 8x8")
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion model {self.motion!r}; expected one of {MOTIONS}")
        if self.fade_tau <= 0 or self.noise < 0:
            raise ValueError("fade_tau must be positive and noise non-negative")
        if isinstance(self.amplitude, (list, tuple)):
            object.__setattr__(self, "amplitude", tuple(float(a) for a in self.amplitude))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        return cls(**d)


@dataclass
class Sequence:
    """Frames ``(N, H, W)`` plus optional landmarks ``(N, M, 2)`` and
    ground-truth Lagrangian fields ``(N-1, 2, H, W)``."""

    frames: np.ndarray
    landmarks: np.ndarray | None = None
    gt_fields: np.ndarray | None = None
    name: str = "sequence"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError(f"frames must be (N, H, W), got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError("frames contain non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def __len__(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------- motion maps


def _center(cfg: PhantomConfig) -> np.ndarray:
    return np.array([(cfg.width - 1) / 2, (cfg.height - 1) / 2])


def _contraction(cfg: PhantomConfig, n: int) -> float:
    if cfg.frames < 2:
        return 0.0
    return -float(cfg.amplitude) * math.sin(math.pi * n / (cfg.frames - 1))


def _annulus_sigma(cfg: PhantomConfig) -> float:
    return 0.3 * min(cfg.height, cfg.width)


def forward_map(cfg: PhantomConfig, n: int, p: np.ndarray) -> np.ndarray:
    """Analytic position at frame ``n`` of material points ``p`` (..., 2) of frame 0."""
    p = np.asarray(p, dtype=np.float64)
    c = _center(cfg)
    if cfg.motion == "translation":
        return p + n * np.asarray(cfg.amplitude, dtype=np.float64)
    if cfg.motion == "rotation":
        t = n * float(cfg.amplitude)
        d = p - c
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        return c + d @ rot.T
    k = _contraction(cfg, n)
    d = p - c
    r2 = (d ** 2).sum(-1, keepdims=True)
    g = np.exp(-r2 / (2 * _annulus_sigma(cfg) ** 2))
    return c + (1 + k * g) * d


def inverse_map(cfg: PhantomConfig, n: int, q: np.ndarray, iters: int = 30, tol: float = 1e-6) -> np.ndarray:
    """Frame-0 positions of points ``q`` observed at frame ``n``.

    Exact for translation and rotation; fixed-point iteration for the annulus.
    """
    q = np.asarray(q, dtype=np.float64)
    c = _center(cfg)
    if cfg.motion == "translation":
        return q - n * np.asarray(cfg.amplitude, dtype=np.float64)
    if cfg.motion == "rotation":
        t = -n * float(cfg.amplitude)
        d = q - c
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        return c + d @ rot.T
    k = _contraction(cfg, n)
    s2 = 2 * _annulus_sigma(cfg) ** 2
    dq = q - c
    d = dq.copy()
    for _ in range(iters):
        g = np.exp(-(d ** 2).sum(-1, keepdims=True) / s2)
        new = dq / (1 + k * g)
        step = np.abs(new - d).max() if new.size else 0.0
        d = new
        if step < tol:
            break
    return c + d


# ------------------------------------------------------------------- texture


def brightness(cfg: PhantomConfig, p: np.ndarray) -> np.ndarray:
    """Smooth annulus mask: bright ring on a dimmer background."""
    c = _center(cfg)
    r = np.sqrt(((p - c) ** 2).sum(-1))
    radius = 0.3 * min(cfg.height, cfg.width)
    width = 0.12 * min(cfg.height, cfg.width)
    return cfg.background + (1 - cfg.background) * np.exp(-0.5 * ((r - radius) / width) ** 2)


def reference_texture(cfg: PhantomConfig, p: np.ndarray) -> np.ndarray:
    """Tagged reference intensity at continuous positions ``p`` (..., 2).

    Two cosine tag families at +/-45 degrees modulate the annulus brightness.
    """
    c = _center(cfg)
    d = p - c
    u = (d[..., 0] + d[..., 1]) / math.sqrt(2)
    v = (d[..., 0] - d[..., 1]) / math.sqrt(2)
    a, s = cfg.tag_depth, cfg.tag_spacing
    tag_u = 1 - a * 0.5 * (1 + np.cos(2 * math.pi * u / s))
    tag_v = 1 - a * 0.5 * (1 + np.cos(2 * math.pi * v / s))
    return brightness(cfg, p) * tag_u * tag_v


def fade(cfg: PhantomConfig, n: int) -> float:
    return cfg.fade_floor + (1 - cfg.fade_floor) * math.exp(-n / cfg.fade_tau)


def pixel_grid(height: int, width: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return np.stack((xs, ys), axis=-1)


def landmark_positions(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Frame-0 landmarks evenly spread on the bright ring, random phase."""
    c = _center(cfg)
    radius = 0.3 * min(cfg.height, cfg.width)
    phase = rng.uniform(0, 2 * math.pi)
    ang = phase + 2 * math.pi * np.arange(cfg.landmarks) / cfg.landmarks
    return c + radius * np.stack((np.cos(ang), np.sin(ang)), axis=-1)


def generate(cfg: PhantomConfig, seed: int = 0) -> Sequence:
    """Render a tagged sequence with ground-truth fields and landmark tracks."""
    rng = np.random.default_rng(seed)
    grid = pixel_grid(cfg.height, cfg.width)
    frames, gt = [], []
    for n in range(cfg.frames):
        src = inverse_map(cfg, n, grid)
        img = fade(cfg, n) * reference_texture(cfg, src)
        if cfg.noise:
            img = img + rng.normal(0.0, cfg.noise, img.shape)
        frames.append(np.clip(img, 0.0, 1.0))
        if n:
            gt.append(np.moveaxis(forward_map(cfg, n, grid) - grid, -1, 0))
    gt_fields = np.stack(gt) if gt else np.zeros((0, 2, cfg.height, cfg.width))
    if gt and count_nonpositive(jacobian_determinant(torch.from_numpy(gt_fields))) > 0:
        raise ValueError("non-diffeomorphic phantom")
    x0 = landmark_positions(cfg, rng)
    tracks = np.stack([forward_map(cfg, n, x0) for n in range(cfg.frames)])
    return Sequence(
        frames=np.stack(frames).astype(np.float32),
        landmarks=tracks,
        gt_fields=gt_fields.astype(np.float32),
        name=f"{cfg.motion}-{seed}",
        meta={"config": cfg.to_dict(), "seed": seed},
    )


def normalize_intensity(frame: np.ndarray) -> np.ndarray:
    """Divide by twice the median intensity and clip to [0, 1]."""
    med = float(np.median(frame))
    if med <= 0:
        return np.clip(frame, 0.0, 1.0)
    return np.clip(frame / (2 * med), 0.0, 1.0)


def pad_frames(frames: np.ndarray, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Repeat the last frame up to ``length``; returns (frames, valid mask)."""
    n = frames.shape[0]
    if n >= length:
        return frames, np.ones(n, dtype=bool)
    pad = np.repeat(frames[-1:], length - n, axis=0)
    valid = np.arange(length) < n
    return np.concatenate((frames, pad)), valid


def smooth_random_field(shape: tuple[int, int], max_abs: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian-smoothed white noise ``(2, H, W)`` scaled to ``max |.| = max_abs``."""
    noise = rng.standard_normal((2, *shape))
    f = np.stack([gaussian_filter(c, sigma, mode="reflect") for c in noise])
    return f * (max_abs / np.abs(f).max())


# ------------------------------------------------------------- suite + export


def phantom_suite(count: int, seed: int, base: PhantomConfig = PhantomConfig()) -> list[Sequence]:
    """Mixed-motion benchmark: motion models cycle, amplitudes and directions
    are drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        motion = MOTIONS[i % len(MOTIONS)]
        if motion == "translation":
            ang = rng.uniform(0, 2 * math.pi)
            speed = rng.uniform(0.35, 0.6)
            amp = (speed * math.cos(ang), speed * math.sin(ang))
        elif motion == "rotation":
            amp = float(rng.choice([-1, 1]) * rng.uniform(0.012, 0.02))
        else:
            amp = float(rng.uniform(0.1, 0.2))
        cfg = replace(base, motion=motion, amplitude=amp)
        out.append(generate(cfg, seed=int(rng.integers(2**31))))
    return out


def export(seq: Sequence, directory: str | Path) -> Path:
    """Write frames, fields and landmarks plus a ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    path = tio.save_tgf(directory / "frames.tgf1", seq.frames[:, None])
    files["frames"] = path
    if seq.gt_fields is not None:
        files["gt_fields"] = tio.save_tgf(directory / "gt_fields.tgf1", seq.gt_fields)
    if seq.landmarks is not None:
        files["landmarks"] = tio.save_landmarks(directory / "landmarks.csv", seq.landmarks)
    n, h, w = seq.frames.shape
    manifest = {
        "format": "tagtrack-sequence",
        "version": 1,
        "name": seq.name,
        "frames": n,
        "height": h,
        "width": w,
        "seed": seq.meta.get("seed"),
        "config": seq.meta.get("config"),
        "files": {k: {"path": p.name, "sha256": tio.sha256_file(p)} for k, p in files.items()},
    }
    jsonschema.validate(manifest, SEQUENCE_MANIFEST_SCHEMA)
    tio.write_json(directory / "manifest.json", manifest)
    return directory


def load_sequence(directory: str | Path) -> Sequence:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    jsonschema.validate(manifest, SEQUENCE_MANIFEST_SCHEMA)
    files = manifest["files"]
    frames = tio.load_tgf(directory / files["frames"]["path"])[:, 0]
    gt = landmarks = None
    if "gt_fields" in files:
        gt = tio.load_tgf(directory / files["gt_fields"]["path"])
    if "landmarks" in files:
        landmarks = tio.load_landmarks(directory / files["landmarks"]["path"])
    meta = {"seed": manifest.get("seed"), "config": manifest.get("config")}
    return Sequence(frames, landmarks, gt, name=manifest.get("name", directory.name), meta=meta)


def load_dataset(directory: str | Path) -> list[Sequence]:
    """Load every sequence sub-directory (those holding a manifest), sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    if (directory / "manifest.json").exists() and (directory / "frames.tgf1").exists():
        return [load_sequence(directory)]
    subdirs = sorted(p for p in directory.iterdir() if (p / "manifest.json").exists() and (p / "frames.tgf1").exists())
    if not subdirs:
        raise ValueError(f"no sequences found under {directory}")
    return [load_sequence(p) for p in subdirs]
