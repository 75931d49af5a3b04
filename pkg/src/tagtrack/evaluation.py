"""Landmark RMS and Jacobian diagnostics."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .engine import TrainConfig, infer_sequence
from .grid import count_nonpositive, jacobian_determinant
from .lagrange import MotionSequence, track_points
from .synth import Sequence


def rms(pred, gt) -> float:
    """Root mean squared Euclidean distance between matched point sets."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError(f"point sets must be matching (M, 2) arrays, got {pred.shape} and {gt.shape}")
    if pred.shape[0] < 1:
        raise ValueError("need at least one point")
    return float(np.sqrt(((pred - gt) ** 2).sum(axis=1).mean()))


@dataclass
class SequenceReport:
    name: str
    rms_per_frame: list[float]
    nonpositive_jacobian: list[int]
    seconds: float

    @property
    def mean_rms(self) -> float:
        return float(np.mean(self.rms_per_frame))


@dataclass
class EvalReport:
    sequences: list[SequenceReport]
    spacing_mm: float | None = None
    mode: str | None = None
    extra: dict = field(default_factory=dict)

    def all_rms(self) -> np.ndarray:
        return np.concatenate([s.rms_per_frame for s in self.sequences])

    @property
    def rms_mean(self) -> float:
        return float(self.all_rms().mean())

    @property
    def rms_std(self) -> float:
        return float(self.all_rms().std())

    @property
    def nonpositive_total(self) -> int:
        return int(sum(sum(s.nonpositive_jacobian) for s in self.sequences))

    def frame_curve(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and std of RMS per frame index across sequences (frames 1..N-1)."""
        n = min(len(s.rms_per_frame) for s in self.sequences)
        table = np.array([s.rms_per_frame[:n] for s in self.sequences])
        return table.mean(axis=0), table.std(axis=0)

    def to_dict(self) -> dict:
        mean, std = self.frame_curve()
        out = {
            "mode": self.mode,
            "rms_px": {"mean": self.rms_mean, "std": self.rms_std},
            "nonpositive_jacobian": {
                "total": self.nonpositive_total,
                "per_field_mean": float(np.mean([c for s in self.sequences for c in s.nonpositive_jacobian])),
            },
            "seconds": {
                "mean": float(np.mean([s.seconds for s in self.sequences])),
                "std": float(np.std([s.seconds for s in self.sequences])),
            },
            "frame_curve": [
                {"frame": i + 1, "rms_px_mean": float(m), "rms_px_std": float(s)}
                for i, (m, s) in enumerate(zip(mean, std))
            ],
            "sequences": [asdict(s) | {"mean_rms": s.mean_rms} for s in self.sequences],
            "spacing_mm": self.spacing_mm,
        }
        if self.spacing_mm:
            out["rms_mm"] = {"mean": self.rms_mean * self.spacing_mm, "std": self.rms_std * self.spacing_mm}
        out.update(self.extra)
        return out

    def frame_rows(self) -> list[dict]:
        mean, _ = self.frame_curve()
        return [{"frame": i + 1, "rms_px": float(m)} for i, m in enumerate(mean)]


def track_landmarks(motion: MotionSequence, x0) -> np.ndarray:
    """Landmark positions ``(N-1, M, 2)`` at frames 1..N-1 from frame-0 points."""
    lag = motion.lag_fields.double()
    pts = torch.as_tensor(np.asarray(x0), dtype=torch.float64)
    return np.stack([track_points(lag[n], pts).numpy() for n in range(lag.shape[0])])


def score_motion(seq: Sequence, motion: MotionSequence, seconds: float = 0.0) -> SequenceReport:
    if seq.landmarks is None:
        raise ValueError(f"sequence {seq.name} has no landmarks")
    tracked = track_landmarks(motion, seq.landmarks[0])
    per_frame = [rms(tracked[n], seq.landmarks[n + 1]) for n in range(tracked.shape[0])]
    counts = [count_nonpositive(jacobian_determinant(f)) for f in motion.inf_fields]
    return SequenceReport(seq.name, per_frame, counts, seconds)


def evaluate(model, sequences: list[Sequence], cfg: TrainConfig, spacing_mm: float | None = None) -> EvalReport:
    """Track frame-0 landmarks through every test sequence and score them."""
    reports = []
    for seq in sequences:
        if seq.landmarks is None:
            raise ValueError(f"sequence {seq.name} has no landmarks")
        t0 = time.perf_counter()
        motion = infer_sequence(seq.frames, model, cfg)
        elapsed = time.perf_counter() - t0
        reports.append(score_motion(seq, motion, elapsed))
    return EvalReport(reports, spacing_mm, cfg.mode)


def ground_truth_motion(seq: Sequence) -> MotionSequence:
    """Motion built from the phantom's analytic Lagrangian fields."""
    lag = torch.from_numpy(seq.gt_fields.astype(np.float64))
    return MotionSequence(lag, lag)
