"""Command-line interface: ``tagtrack {synth,train,track,eval}``.

Every run writes its artifacts plus one ``run_manifest.json`` into ``--out``.
Files are written under a ``.partial`` name and renamed when complete. On bad
input the command prints a one-line diagnostic to stderr and exits with 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import torch
from PIL import Image, ImageDraw

from . import __version__
from . import io as tio
from .engine import TrainConfig, configure_threads, infer_sequence, load_checkpoint, save_checkpoint, train
from .evaluation import evaluate
from .lagrange import track_points
from .losses import LOSS_LOG_COLUMNS
from .synth import PhantomConfig, export, generate, load_dataset, load_sequence, phantom_suite

MANIFEST_NAME = "run_manifest.json"

RUN_MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["command", "version", "config_hash", "seed", "inputs", "outputs", "timings"],
    "properties": {
        "command": {"enum": ["synth", "train", "track", "eval"]},
        "version": {"type": "string"},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "seed": {"type": ["integer", "null"]},
        "inputs": {"type": "object", "additionalProperties": {"type": "string"}},
        "outputs": {"type": "object", "additionalProperties": {"type": "string", "pattern": "^[0-9a-f]{64}$"}},
        "timings": {"type": "object", "additionalProperties": {"type": "number"}},
    },
}

EVAL_REPORT_SCHEMA = {
    "type": "object",
    "required": ["rms_px", "nonpositive_jacobian", "seconds", "frame_curve", "sequences"],
    "properties": {
        "rms_px": {
            "type": "object",
            "required": ["mean", "std"],
            "properties": {"mean": {"type": "number", "minimum": 0}, "std": {"type": "number", "minimum": 0}},
        },
        "nonpositive_jacobian": {
            "type": "object",
            "required": ["total"],
            "properties": {"total": {"type": "integer", "minimum": 0}},
        },
        "seconds": {"type": "object", "required": ["mean", "std"]},
        "frame_curve": {"type": "array", "items": {"type": "object", "required": ["frame", "rms_px_mean"]}},
        "sequences": {"type": "array", "minItems": 1},
        "comparison": {"type": "array"},
    },
}


class CLIError(Exception):
    """Bad user input; reported as a one-line diagnostic."""


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"config file {path} does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CLIError(f"config file {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise CLIError(f"config file {path} must hold a JSON object")
    return data


def _write_manifest(out: Path, command: str, config: dict, seed, inputs: dict, timings: dict) -> Path:
    outputs = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST_NAME and not p.name.endswith(".partial"):
            outputs[p.relative_to(out).as_posix()] = tio.sha256_file(p)
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "out": str(out),
        "outputs": outputs,
        "timings": timings,
    }
    jsonschema.validate(manifest, RUN_MANIFEST_SCHEMA)
    return tio.write_json(out / MANIFEST_NAME, manifest)


# ------------------------------------------------------------------- synth


def cmd_synth(args) -> None:
    raw = _read_json(args.config)
    unknown = set(raw) - {"count", "mixed", "phantom"}
    if unknown:
        raise CLIError(f"unknown synth config keys: {sorted(unknown)}")
    count = raw.get("count", 20)
    if not isinstance(count, int) or count < 1:
        raise CLIError("synth config 'count' must be a positive integer")
    mixed = bool(raw.get("mixed", True))
    phantom = dict(raw.get("phantom", {}))
    if args.frames is not None:
        phantom["frames"] = args.frames
    try:
        base = PhantomConfig.from_dict(phantom)
    except TypeError as exc:
        raise CLIError(f"invalid phantom config: {exc}") from None
    seed = args.seed
    t0 = time.perf_counter()
    if mixed:
        seqs = phantom_suite(count, seed, base)
    else:
        seqs = [generate(base, seed + i) for i in range(count)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, seq in enumerate(seqs):
        export(seq, out / f"seq{i:03d}")
    config = {"count": count, "mixed": mixed, "phantom": base.to_dict()}
    _write_manifest(out, "synth", config, seed, {}, {"total_s": time.perf_counter() - t0})


# ------------------------------------------------------------------- train


def _train_config(args) -> TrainConfig:
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.mode is not None:
        raw["mode"] = args.mode
    try:
        return TrainConfig.from_dict(raw)
    except TypeError as exc:
        raise CLIError(f"invalid train config: {exc}") from None


def cmd_train(args) -> None:
    cfg = _train_config(args)
    data = Path(args.data)
    if not data.is_dir():
        raise CLIError(f"data directory {data} does not exist")
    dataset = load_dataset(data)
    val_set = load_dataset(args.val) if args.val else None
    t0 = time.perf_counter()
    result = train(dataset, cfg, val_set)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, cfg, result.best_step, out / "checkpoint")
    tio.write_csv(out / "loss.csv", LOSS_LOG_COLUMNS, result.history)
    tio.write_csv(out / "val.csv", ["step", "val_loss"], [{"step": s, "val_loss": v} for s, v in result.val_history])
    inputs = {"data": data}
    if args.val:
        inputs["val"] = args.val
    _write_manifest(out, "train", cfg.to_dict(), cfg.seed, inputs, {"train_s": elapsed})


# ------------------------------------------------------------------- track


def _upscaled(frame: np.ndarray, scale: int) -> Image.Image:
    img = Image.fromarray(np.clip(frame * 255, 0, 255).astype(np.uint8), mode="L")
    return img.resize((frame.shape[1] * scale, frame.shape[0] * scale), Image.NEAREST).convert("RGB")


def _moved(lag: np.ndarray | None, pts: np.ndarray) -> np.ndarray:
    if lag is None:
        return pts
    return track_points(torch.from_numpy(lag).double(), torch.from_numpy(pts)).numpy()


def render_tag_grid(frame: np.ndarray, lag: np.ndarray | None, spacing: int = 8, scale: int = 4) -> Image.Image:
    """Regular grid drawn at frame 0 and carried along by the Lagrangian field."""
    h, w = frame.shape
    img = _upscaled(frame, scale)
    draw = ImageDraw.Draw(img)
    t = np.linspace(0, 1, 4 * max(h, w))
    lines = [np.stack([np.full_like(t, x), t * (h - 1)], 1) for x in range(spacing // 2, w, spacing)]
    lines += [np.stack([t * (w - 1), np.full_like(t, y)], 1) for y in range(spacing // 2, h, spacing)]
    for pts in lines:
        moved = _moved(lag, pts)
        draw.line([tuple(p) for p in (moved + 0.5) * scale], fill=(255, 60, 60), width=1)
    return img


def render_quiver(frame: np.ndarray, field: np.ndarray, step: int = 4, scale: int = 4, gain: float = 2.0) -> Image.Image:
    """Arrows of a displacement field on a grid with spacing ``step``."""
    h, w = frame.shape
    img = _upscaled(frame, scale)
    draw = ImageDraw.Draw(img)
    for y in range(step // 2, h, step):
        for x in range(step // 2, w, step):
            dx, dy = field[0, y, x] * gain, field[1, y, x] * gain
            x0, y0 = (x + 0.5) * scale, (y + 0.5) * scale
            x1, y1 = x0 + dx * scale, y0 + dy * scale
            draw.line([(x0, y0), (x1, y1)], fill=(60, 200, 255), width=1)
            ang = math.atan2(y1 - y0, x1 - x0)
            for da in (2.6, -2.6):
                draw.line([(x1, y1), (x1 + 3 * math.cos(ang + da), y1 + 3 * math.sin(ang + da))], fill=(60, 200, 255))
    return img


def _save_png(path: Path, img: Image.Image) -> None:
    with tio.atomic_path(path) as tmp:
        img.save(tmp, format="PNG")


def cmd_track(args) -> None:
    model, cfg, _ = load_checkpoint(_checkpoint_dir(args.checkpoint))
    seq = load_sequence(_existing_dir(args.sequence, "sequence"))
    t0 = time.perf_counter()
    motion = infer_sequence(seq.frames, model, cfg)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inf = motion.inf_fields.numpy()
    lag = motion.lag_fields.numpy()
    tio.save_tgf(out / "inf_fields.tgf1", inf)
    tio.save_tgf(out / "lag_fields.tgf1", lag)
    if seq.landmarks is not None:
        x0 = seq.landmarks[0].astype(np.float64)
    else:
        ys, xs = np.mgrid[4:seq.shape[0]:8, 4:seq.shape[1]:8]
        x0 = np.stack([xs.ravel(), ys.ravel()], 1).astype(np.float64)
    tracks = [x0] + [_moved(lag[n], x0) for n in range(lag.shape[0])]
    tio.save_landmarks(out / "tracked_landmarks.csv", np.stack(tracks))
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    for n, frame in enumerate(seq.frames):
        _save_png(figs / f"tag_grid_{n:03d}.png", render_tag_grid(frame, lag[n - 1] if n else None))
        if n:
            _save_png(figs / f"quiver_{n:03d}.png", render_quiver(frame, lag[n - 1]))
    timings = {"inference_s": elapsed}
    _write_manifest(out, "track", cfg.to_dict(), cfg.seed, {"checkpoint": args.checkpoint, "sequence": args.sequence}, timings)


# -------------------------------------------------------------------- eval


def cmd_eval(args) -> None:
    data = _existing_dir(args.data, "data")
    sequences = load_dataset(data)
    if any(s.landmarks is None for s in sequences):
        raise CLIError("every evaluation sequence needs landmarks")
    t0 = time.perf_counter()
    reports = []
    for ckpt in args.checkpoint:
        model, cfg, _ = load_checkpoint(_checkpoint_dir(ckpt))
        reports.append((ckpt, cfg, evaluate(model, sequences, cfg, args.spacing)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, cfg, main = reports[0]
    report = main.to_dict()
    report["checkpoint"] = str(args.checkpoint[0])
    report["comparison"] = [
        {
            "checkpoint": str(c),
            "mode": r.mode,
            "rms_px_mean": r.rms_mean,
            "rms_px_std": r.rms_std,
            "final_frame_rms_px": float(r.frame_curve()[0][-1]),
            "nonpositive_jacobian": r.nonpositive_total,
            "seconds_mean": float(np.mean([s.seconds for s in r.sequences])),
        }
        for c, _, r in reports
    ]
    jsonschema.validate(report, EVAL_REPORT_SCHEMA)
    tio.write_json(out / "report.json", report)
    tio.write_csv(out / "frame_rms.csv", ["frame", "rms_px"], main.frame_rows())
    _save_rms_curve(out / "rms_curve.png", reports)
    if len(reports) > 1:
        cols = list(report["comparison"][0])
        tio.write_csv(out / "comparison.csv", cols, report["comparison"])
    inputs = {"data": args.data} | {f"checkpoint{i}": c for i, c in enumerate(args.checkpoint)}
    _write_manifest(out, "eval", cfg.to_dict(), cfg.seed, inputs, {"total_s": time.perf_counter() - t0})


def _save_rms_curve(path: Path, reports) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for _, cfg, r in reports:
        mean, std = r.frame_curve()
        frames = np.arange(1, len(mean) + 1)
        ax.errorbar(frames, mean, yerr=std, capsize=3, label=cfg.mode)
    ax.set_xlabel("frame")
    ax.set_ylabel("landmark RMS (px)")
    ax.legend()
    fig.tight_layout()
    with tio.atomic_path(path) as tmp:
        fig.savefig(tmp, format="png", metadata={"Software": None})
    plt.close(fig)


# ------------------------------------------------------------------ parser


def _existing_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CLIError(f"{what} directory {path} does not exist")
    return p


def _checkpoint_dir(path: str) -> Path:
    p = _existing_dir(path, "checkpoint")
    if (p / "checkpoint" / "checkpoint.json").exists():
        p = p / "checkpoint"
    if not (p / "checkpoint.json").exists():
        raise CLIError(f"{path} holds no checkpoint.json")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tagtrack", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--config", help="JSON with 'count', 'mixed' and 'phantom' keys")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, help="override the number of frames")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the posterior network")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--data", required=True, help="dataset directory written by 'synth'")
    p.add_argument("--val", help="optional validation dataset directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", help="A1..A6 or full")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="track one sequence with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="landmark RMS and Jacobian report")
    p.add_argument("--checkpoint", required=True, action="append", help="repeat to compare models")
    p.add_argument("--data", required=True)
    p.add_argument("--spacing", type=float, help="pixel spacing in mm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_threads()
    try:
        args.func(args)
    except (CLIError, ValueError, TypeError, KeyError, FileNotFoundError, jsonschema.ValidationError) as exc:
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        print(f"tagtrack {args.command}: error: {' '.join(msg.split())}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
