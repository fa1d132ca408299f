"""Training and evaluation loops: clip sampling, kinematic-prior
preparation, the optimization step, checkpointing with exact resume, and
sliding-window evaluation feeding the metric suite."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace

import cv2
import numpy as np
import torch

from . import losses as L
from .data import (
    AnnotationTrack,
    DatasetError,
    VideoSequence,
    decode_events,
    gaussian_soft_labels,
    load_annotations,
    load_video_frames,
    reassemble_windows,
)
from .kinematics import ClassicalBackend, FileBackend, read_flow_file, resize_flow
from .metrics import MetricsReport, compute_report
from .model import AudibleActionNet, ModelConfig, load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    # optimizer and schedule (full-scale baseline)
    learning_rate: float = 5e-6
    batch_size: int = 4
    iterations: int = 20000
    epochs: int = 0  # optional alternative stop: > 0 converts to iterations
    clip_len: int = 64
    input_size: int = 112
    # architecture
    encoder: str = "toy"
    attn_dim: int = 256
    fusion_channels: int = 256
    transformer_width: int = 256
    transformer_layers: int = 2
    transformer_heads: int = 4
    # objective
    lambda_action: float = 1.0
    lambda_cont: float = 0.01
    lambda_temp: float = 0.002
    lambda_ce: float = 1.0
    lambda_focal: float = 0.1
    rank_alpha: float = 1.0
    focal_gamma: float = 2.0
    soft_sigma: float = 1.0
    soft_radius: int = 2
    contrast_frames: int = 8
    # data / inference
    flow_backend: str = "classical"  # "analytic" | "classical" | "file"
    match_window: int = 2
    event_threshold: float = 0.5
    min_separation: int = 2
    # bookkeeping
    rng_seed: int = 0
    checkpoint_every: int = 500
    num_threads: int = 0  # > 0 pins torch threads (1 for exact reproducibility)

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "iterations", "clip_len", "input_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.flow_backend not in ("analytic", "classical", "file"):
            raise ValueError(f"unknown flow backend {self.flow_backend!r}")

    @property
    def loss_weights(self) -> L.LossWeights:
        return L.LossWeights(
            action=self.lambda_action,
            contrastive=self.lambda_cont,
            temporal=self.lambda_temp,
            ce=self.lambda_ce,
            focal=self.lambda_focal,
            rank_alpha=self.rank_alpha,
            focal_gamma=self.focal_gamma,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            encoder=self.encoder,
            input_size=self.input_size,
            attn_dim=self.attn_dim,
            fusion_channels=self.fusion_channels,
            transformer_layers=self.transformer_layers,
            transformer_heads=self.transformer_heads,
            transformer_width=self.transformer_width,
            max_clip_len=self.clip_len,
        )


def toy_overrides(config: TrainConfig | None = None, **extra) -> TrainConfig:
    """Desk-scale profile for CPU runs; full-scale defaults stay the baseline."""
    base = config or TrainConfig()
    overrides = dict(
        clip_len=32,
        input_size=56,
        learning_rate=1e-4,
        attn_dim=64,
        fusion_channels=64,
        transformer_width=64,
    )
    overrides.update(extra)
    return replace(base, **overrides)


# -- flat key = value config files ------------------------------------------


def save_config(config: TrainConfig, path: str | os.PathLike) -> None:
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(TrainConfig)]
    from .data import write_atomic

    write_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))


def load_config(path: str | os.PathLike, base: TrainConfig | None = None) -> TrainConfig:
    """Parse a flat `key = value` file; unknown keys are rejected."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    casts = {"float": float, "int": int, "str": str}
    values = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise DatasetError(f"{path}:{lineno}: expected `key = value`")
                key, _, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if key not in types:
                    raise DatasetError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = casts[types[key]](value)
    except FileNotFoundError as exc:
        raise DatasetError(f"config file not found: {path}") from exc
    return replace(base or TrainConfig(), **values)


# -- datasets ----------------------------------------------------------------


@dataclass
class VideoRecord:
    """One video with labels and (optionally) precomputed flow arrays."""

    video: VideoSequence
    track: AnnotationTrack
    flow_fwd: np.ndarray | None = None  # [T-1, H, W, 2]
    flow_bwd: np.ndarray | None = None


def load_dataset(root: str | os.PathLike) -> list[VideoRecord]:
    """Load an exported dataset directory (annotations.json + frames/ +
    optional flow/)."""
    root = os.fspath(root)
    tracks = load_annotations(os.path.join(root, "annotations.json"))
    records = []
    for track in tracks:
        frames_dir = os.path.join(root, "frames", track.video_id)
        video = load_video_frames(frames_dir, video_id=track.video_id, fps=track.fps)
        if video.num_frames != track.num_frames:
            raise DatasetError(
                f"{track.video_id}: annotation declares {track.num_frames} frames "
                f"but {video.num_frames} were found"
            )
        fwd = bwd = None
        flow_dir = os.path.join(root, "flow", track.video_id)
        if os.path.isdir(flow_dir):
            t = video.num_frames
            fwd = np.stack(
                [read_flow_file(os.path.join(flow_dir, f"flow_fwd_{i:06d}.bin")) for i in range(t - 1)]
            )
            bwd = np.stack(
                [read_flow_file(os.path.join(flow_dir, f"flow_bwd_{i:06d}.bin")) for i in range(t - 1)]
            )
        records.append(VideoRecord(video=video, track=track, flow_fwd=fwd, flow_bwd=bwd))
    return records


def _flow_arrays(record: VideoRecord, backend_name: str) -> tuple[np.ndarray, np.ndarray]:
    if backend_name in ("analytic", "file"):
        if record.flow_fwd is None or record.flow_bwd is None:
            raise DatasetError(
                f"{record.video.id}: flow backend {backend_name!r} requires "
                "precomputed flow for this video"
            )
        return record.flow_fwd, record.flow_bwd
    backend = ClassicalBackend()
    fwd, bwd = backend.compute(record.video.frames)
    return np.stack([f.flow for f in fwd]), np.stack([b.flow for b in bwd])


@dataclass
class PreparedVideo:
    """Model-ready tensors for a whole video, priors edge-padded to length T
    so every frame (including the trimmed ends) carries a prior."""

    video_id: str
    frames: torch.Tensor  # [T, 3, S, S]
    v_fwd: torch.Tensor  # [T, 2, S, S]
    v_bwd: torch.Tensor
    a_fwd: torch.Tensor
    a_bwd: torch.Tensor
    soft_targets: torch.Tensor  # [T]
    keyframes: list[int]


def prepare_video(record: VideoRecord, config: TrainConfig) -> PreparedVideo:
    size = config.input_size
    video = record.video
    t = video.num_frames
    frames = np.empty((t, size, size, 3), dtype=np.float32)
    for i in range(t):
        frames[i] = cv2.resize(video.frames[i], (size, size), interpolation=cv2.INTER_AREA)

    fwd, bwd = _flow_arrays(record, config.flow_backend)
    fwd = np.stack([resize_flow(f, size) for f in fwd])
    bwd = np.stack([resize_flow(b, size) for b in bwd])

    # interior frames 1..T-2, then edge-replicated to cover frames 0 and T-1
    idx = np.arange(1, t - 1)
    v_f = fwd[idx]
    v_b = bwd[idx - 1]
    a_f = fwd[idx] - fwd[idx - 1]
    a_b = bwd[idx] - bwd[idx - 1]

    def pad(arr):
        return np.concatenate([arr[:1], arr, arr[-1:]])

    soft = gaussian_soft_labels(record.track, config.soft_sigma, config.soft_radius)

    def chw(arr):
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))

    return PreparedVideo(
        video_id=video.id,
        frames=chw(frames),
        v_fwd=chw(pad(v_f)),
        v_bwd=chw(pad(v_b)),
        a_fwd=chw(pad(a_f)),
        a_bwd=chw(pad(a_b)),
        soft_targets=torch.from_numpy(soft.targets.astype(np.float32)),
        keyframes=record.track.keyframes,
    )


def _clip_slice(pv: PreparedVideo, start: int, length: int):
    t = pv.frames.shape[0]
    end = min(start + length, t)
    pad = start + length - end

    def take(x, pad_value=None):
        chunk = x[start:end]
        if pad:
            tail = chunk[-1:].expand(pad, *chunk.shape[1:]) if pad_value is None else pad_value
            chunk = torch.cat([chunk, tail])
        return chunk

    frames = take(pv.frames)
    v_f, v_b = take(pv.v_fwd), take(pv.v_bwd)
    a_f, a_b = take(pv.a_fwd), take(pv.a_bwd)
    targets = pv.soft_targets[start:end]
    if pad:
        targets = torch.cat([targets, torch.zeros(pad)])
    return frames, v_f, v_b, a_f, a_b, targets


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: AudibleActionNet
    history: list[dict]
    checkpoint_path: str | None = None
    best_validation: dict | None = None


def _batch_losses(model, batch, config: TrainConfig, rng: np.random.Generator):
    frames, v_f, v_b, a_f, a_b, targets = (torch.stack(x) for x in zip(*batch))
    probs, maps, feat, masked = model(frames, v_f, v_b, a_f, a_b)
    b, k = probs.shape[:2]
    weights = config.loss_weights

    action = L.action_loss(probs.reshape(b * k, 2), targets.reshape(b * k), weights)

    n_contrast = min(config.contrast_frames, b * k)
    pick = torch.from_numpy(rng.choice(b * k, size=n_contrast, replace=False))
    feat_flat = feat.reshape(b * k, *feat.shape[2:])
    masked_flat = masked.reshape(b * k, *masked.shape[2:])
    f_m = masked_flat[pick].mean(dim=(2, 3))
    f_n = (feat_flat[pick] - masked_flat[pick]).mean(dim=(2, 3))
    contrastive = L.contrastive_total(f_m, f_n, weights.rank_alpha)

    temporal = sum(L.temporal_smoothness(maps[i]) for i in range(b))

    total = L.total_loss(action, contrastive, temporal, weights)
    return total, {
        "action": float(action.detach()),
        "contrastive": float(contrastive.detach()),
        "temporal": float(temporal.detach()),
        "total": float(total.detach()),
    }


def train(
    config: TrainConfig,
    train_records: list[VideoRecord],
    val_records: list[VideoRecord] | None = None,
    out_path: str | os.PathLike | None = None,
    resume_from: str | os.PathLike | None = None,
    log_fn=None,
) -> TrainResult:
    """Run the optimization loop and return the trained model.

    Checkpoints go to out_path every checkpoint_every steps and at the end;
    with a validation set the best-F1 checkpoint is what out_path keeps.
    """
    if not train_records:
        raise ValueError("training requires at least one video")
    if config.num_threads > 0:
        torch.set_num_threads(config.num_threads)
    iterations = config.iterations
    if config.epochs > 0:
        steps_per_epoch = max(1, -(-len(train_records) // config.batch_size))
        iterations = config.epochs * steps_per_epoch

    torch.manual_seed(config.rng_seed)
    rng = np.random.default_rng(config.rng_seed)
    model = AudibleActionNet(config.model_config())
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    start_step = 0
    if resume_from is not None:
        model, payload = load_checkpoint(resume_from, config.model_config())
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        optimizer.load_state_dict(payload["optimizer"])
        start_step = payload["step"]
        rng.bit_generator.state = payload["numpy_rng"]
        torch.set_rng_state(payload["torch_rng"])

    prepared = [prepare_video(r, config) for r in train_records]
    model.train()

    history: list[dict] = []
    best_validation = None

    def checkpoint(path):
        save_checkpoint(
            path,
            model,
            extra={
                "step": step + 1,
                "optimizer": optimizer.state_dict(),
                "numpy_rng": rng.bit_generator.state,
                "torch_rng": torch.get_rng_state(),
                "train_config": asdict(config),
            },
        )

    for step in range(start_step, iterations):
        batch = []
        for _ in range(config.batch_size):
            pv = prepared[int(rng.integers(len(prepared)))]
            t = pv.frames.shape[0]
            start = int(rng.integers(0, max(t - config.clip_len, 0) + 1))
            batch.append(_clip_slice(pv, start, config.clip_len))

        optimizer.zero_grad()
        total, parts = _batch_losses(model, batch, config, rng)
        if not torch.isfinite(total):
            raise RuntimeError(
                f"non-finite loss at step {step}: {parts} "
                f"(lr={config.learning_rate}, seed={config.rng_seed})"
            )
        total.backward()
        optimizer.step()
        parts["step"] = step
        history.append(parts)
        if log_fn is not None:
            log_fn(step, parts)

        if out_path is not None and (step + 1) % config.checkpoint_every == 0:
            if val_records is not None:
                model.eval()
                report = evaluate(model, val_records, config)
                model.train()
                if best_validation is None or report.f1 > best_validation["f1"]:
                    best_validation = {"step": step + 1, "f1": report.f1}
                    checkpoint(out_path)
            else:
                checkpoint(out_path)

    step = iterations - 1
    if out_path is not None and best_validation is None:
        checkpoint(out_path)
    model.eval()
    return TrainResult(
        model=model,
        history=history,
        checkpoint_path=os.fspath(out_path) if out_path is not None else None,
        best_validation=best_validation,
    )


# -- evaluation --------------------------------------------------------------


def predict_video(
    model: AudibleActionNet, pv: PreparedVideo, config: TrainConfig
) -> tuple[np.ndarray, list[int], np.ndarray]:
    """Sliding-window inference; returns ([T, 2] probs, events, [T, H', W']
    discriminative maps)."""
    model.eval()
    t = pv.frames.shape[0]
    window = config.clip_len
    window_probs = []
    maps_out = None
    with torch.no_grad():
        for start in range(0, t, window):
            frames, v_f, v_b, a_f, a_b, _ = _clip_slice(pv, start, window)
            probs, maps, _, _ = model(
                frames.unsqueeze(0),
                v_f.unsqueeze(0),
                v_b.unsqueeze(0),
                a_f.unsqueeze(0),
                a_b.unsqueeze(0),
            )
            window_probs.append((start, probs[0].numpy()))
            chunk = maps[0].numpy()
            if maps_out is None:
                maps_out = np.zeros((t, *chunk.shape[1:]), dtype=np.float32)
            valid = min(window, t - start)
            maps_out[start : start + valid] = chunk[:valid]
    probs = reassemble_windows(window_probs, t)
    events = decode_events(probs, config.event_threshold, config.min_separation)
    return probs, events, maps_out


def evaluate(
    model: AudibleActionNet, records: list[VideoRecord], config: TrainConfig
) -> MetricsReport:
    """Sliding-window inference over every video plus the full metric suite."""
    events = []
    for record in records:
        pv = prepare_video(record, config)
        _, pred_events, _ = predict_video(model, pv, config)
        events.append((record.video.id, pred_events, record.track.keyframes))
    return compute_report(events, window=config.match_window)


def evaluate_checkpoint(
    checkpoint_path: str | os.PathLike, records: list[VideoRecord], config: TrainConfig
) -> MetricsReport:
    model, _ = load_checkpoint(checkpoint_path, config.model_config())
    return evaluate(model, records, config)
