"""Video sequences, keyframe annotations, soft labels, clip sampling and
sliding-window segmentation.

All dataset file I/O lives here: the annotation JSON schema and per-frame
PNG directories (frame_%06d.png).
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field

import cv2
import numpy as np


class DatasetError(Exception):
    """A dataset file is missing, malformed, or internally inconsistent."""


_FRAME_NAME = "frame_%06d.png"
_FRAME_RE = re.compile(r"frame_(\d{6})\.png$")


@dataclass(frozen=True)
class VideoSequence:
    """Ordered RGB frames with a frame rate.

    frames: [T, H, W, 3] float32 in [0, 1]. T >= 3 so every interior frame
    keeps bidirectional kinematics after trimming; H, W >= 8.
    """

    id: str
    frames: np.ndarray
    fps: float

    def __post_init__(self):
        frames = np.ascontiguousarray(np.asarray(self.frames, dtype=np.float32))
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ValueError(f"frames must be [T, H, W, 3], got {frames.shape}")
        t, h, w, _ = frames.shape
        if t < 3:
            raise ValueError(f"need at least 3 frames, got {t}")
        if h < 8 or w < 8:
            raise ValueError(f"frames must be at least 8x8, got {h}x{w}")
        if frames.min() < 0.0 or frames.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class AnnotationTrack:
    """Per-frame binary keyframe labels (1 = audible-action keyframe)."""

    video_id: str
    labels: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        if labels.ndim != 1:
            raise ValueError(f"labels must be 1-D, got shape {labels.shape}")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be binary")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def num_frames(self) -> int:
        return self.labels.shape[0]

    @property
    def keyframes(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.labels)]


@dataclass(frozen=True)
class SoftLabelTrack:
    """Gaussian-softened training targets in [0, 1], 1 exactly at keyframes."""

    targets: np.ndarray

    def __post_init__(self):
        targets = np.ascontiguousarray(np.asarray(self.targets, dtype=np.float64))
        if targets.ndim != 1:
            raise ValueError("targets must be 1-D")
        if targets.min() < 0.0 or targets.max() > 1.0:
            raise ValueError("targets must lie in [0, 1]")
        targets.flags.writeable = False
        object.__setattr__(self, "targets", targets)


@dataclass(frozen=True)
class PredictionTrack:
    """Per-frame [p_no_sound, p_sound] rows plus decoded event frames."""

    probs: np.ndarray
    events: list[int]

    def __post_init__(self):
        probs = np.ascontiguousarray(np.asarray(self.probs, dtype=np.float64))
        if probs.ndim != 2 or probs.shape[1] != 2:
            raise ValueError(f"probs must be [T, 2], got {probs.shape}")
        if probs.min() < 0.0 or probs.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-5:
            raise ValueError("probability rows must sum to 1 within 1e-5")
        events = sorted(int(e) for e in self.events)
        t = probs.shape[0]
        if any(e < 0 or e >= t for e in events):
            raise ValueError("event frames must lie in [0, T)")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "events", events)


# ---------------------------------------------------------------------------
# Annotation file I/O
#
# Schema: {"videos": [{"id": str, "num_frames": int, "fps": float,
#                      "keyframes": [int, ...]}, ...]}, 0-based keyframes.
# ---------------------------------------------------------------------------


def load_annotations(path: str | os.PathLike) -> list[AnnotationTrack]:
    """Load annotation tracks from a JSON file, validating the schema."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetError(f"annotation file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"annotation file is not valid JSON: {path}: {exc}") from exc

    if not isinstance(doc, dict) or not isinstance(doc.get("videos"), list):
        raise DatasetError(f"annotation file must be {{'videos': [...]}}: {path}")

    tracks = []
    for idx, entry in enumerate(doc["videos"]):
        where = f"{path}: videos[{idx}]"
        if not isinstance(entry, dict):
            raise DatasetError(f"{where}: entry must be an object")
        try:
            vid = entry["id"]
            num_frames = entry["num_frames"]
            fps = entry["fps"]
            keyframes = entry["keyframes"]
        except KeyError as exc:
            raise DatasetError(f"{where}: missing field {exc}") from exc
        if not isinstance(vid, str):
            raise DatasetError(f"{where}: id must be a string")
        if not isinstance(num_frames, int) or num_frames < 1:
            raise DatasetError(f"{where}: num_frames must be a positive integer")
        if not isinstance(fps, (int, float)) or fps <= 0:
            raise DatasetError(f"{where}: fps must be a positive number")
        if not isinstance(keyframes, list) or not all(
            isinstance(k, int) for k in keyframes
        ):
            raise DatasetError(f"{where}: keyframes must be a list of integers")
        labels = np.zeros(num_frames, dtype=np.int64)
        for k in keyframes:
            if k < 0 or k >= num_frames:
                raise DatasetError(
                    f"{where} (id={vid!r}): keyframe {k} outside [0, {num_frames})"
                )
            labels[k] = 1
        tracks.append(AnnotationTrack(video_id=vid, labels=labels, fps=float(fps)))
    return tracks


def save_annotations(tracks: list[AnnotationTrack], path: str | os.PathLike) -> None:
    """Write tracks in the annotation JSON schema (deterministic formatting)."""
    doc = {
        "videos": [
            {
                "id": tr.video_id,
                "num_frames": int(tr.num_frames),
                "fps": float(tr.fps),
                "keyframes": tr.keyframes,
            }
            for tr in tracks
        ]
    }
    payload = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    write_atomic(path, payload.encode("utf-8"))


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    """Write a file via temp-then-rename so failures leave no partial output."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# Frame-directory I/O
# ---------------------------------------------------------------------------


def save_video_frames(video: VideoSequence, out_dir: str | os.PathLike) -> None:
    """Write frames as frame_%06d.png into out_dir (created if absent)."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    for t in range(video.num_frames):
        img = np.clip(video.frames[t] * 255.0 + 0.5, 0, 255).astype(np.uint8)
        bgr = cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
        ok, buf = cv2.imencode(".png", bgr)
        if not ok:
            raise DatasetError(f"failed to encode frame {t} for {out_dir}")
        write_atomic(os.path.join(out_dir, _FRAME_NAME % t), buf.tobytes())


def load_video_frames(
    frames_dir: str | os.PathLike, video_id: str | None = None, fps: float = 25.0
) -> VideoSequence:
    """Load a VideoSequence from a directory of frame_%06d.png files."""
    frames_dir = os.fspath(frames_dir)
    if not os.path.isdir(frames_dir):
        raise DatasetError(f"frame directory not found: {frames_dir}")
    names = sorted(n for n in os.listdir(frames_dir) if _FRAME_RE.match(n))
    if not names:
        raise DatasetError(f"no frame_%06d.png files in {frames_dir}")
    indices = [int(_FRAME_RE.match(n).group(1)) for n in names]
    if indices != list(range(len(names))):
        raise DatasetError(f"frame indices in {frames_dir} are not contiguous from 0")
    frames = []
    for name in names:
        bgr = cv2.imread(os.path.join(frames_dir, name), cv2.IMREAD_COLOR)
        if bgr is None:
            raise DatasetError(f"unreadable frame file: {os.path.join(frames_dir, name)}")
        frames.append(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0)
    vid = video_id if video_id is not None else os.path.basename(frames_dir)
    return VideoSequence(id=vid, frames=np.stack(frames), fps=fps)


# ---------------------------------------------------------------------------
# Label softening, sampling, windowing, decoding
# ---------------------------------------------------------------------------


def gaussian_soft_labels(
    track: AnnotationTrack, sigma: float = 1.0, radius: int = 2
) -> SoftLabelTrack:
    """Soften binary keyframe labels with a truncated Gaussian kernel.

    targets[t] = max over keyframes k with |t - k| <= radius of
    exp(-(t - k)^2 / (2 sigma^2)); overlapping kernels combine by max so
    targets stay in [0, 1] and keyframes keep target exactly 1.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    t = track.num_frames
    targets = np.zeros(t, dtype=np.float64)
    for k in track.keyframes:
        lo = max(0, k - radius)
        hi = min(t, k + radius + 1)
        offs = np.arange(lo, hi) - k
        kernel = np.exp(-(offs.astype(np.float64) ** 2) / (2.0 * sigma * sigma))
        targets[lo:hi] = np.maximum(targets[lo:hi], kernel)
    return SoftLabelTrack(targets=targets)


def _resize_frames(frames: np.ndarray, size: int) -> np.ndarray:
    out = np.empty((frames.shape[0], size, size, 3), dtype=np.float32)
    for t in range(frames.shape[0]):
        out[t] = cv2.resize(frames[t], (size, size), interpolation=cv2.INTER_AREA)
    return out


def sample_training_clip(
    video: VideoSequence,
    track: AnnotationTrack,
    clip_len: int = 64,
    size: int = 112,
    rng_seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample a contiguous clip with aligned labels, resized to size x size.

    Videos shorter than clip_len are padded by repeating the last frame;
    padded frames carry label 0.
    """
    if track.num_frames != video.num_frames:
        raise ValueError(
            f"label length {track.num_frames} != video length {video.num_frames}"
        )
    t = video.num_frames
    rng = np.random.default_rng(rng_seed)
    if t >= clip_len:
        start = int(rng.integers(0, t - clip_len + 1))
        frames = video.frames[start : start + clip_len]
        labels = track.labels[start : start + clip_len].copy()
    else:
        pad = clip_len - t
        frames = np.concatenate([video.frames, np.repeat(video.frames[-1:], pad, axis=0)])
        labels = np.concatenate([track.labels, np.zeros(pad, dtype=np.int64)])
    return _resize_frames(frames, size), labels


def sliding_windows(
    video: VideoSequence, window: int = 64, step: int = 64
) -> list[tuple[int, np.ndarray]]:
    """Segment a video into fixed-length windows covering [0, T).

    The final window is padded by repeating the last frame; reassembly must
    discard predictions on padded positions (see reassemble_windows).
    """
    if window < 3:
        raise ValueError(f"window must be >= 3, got {window}")
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    t = video.num_frames
    out = []
    for start in range(0, t, step):
        chunk = video.frames[start : start + window]
        if chunk.shape[0] < window:
            pad = window - chunk.shape[0]
            chunk = np.concatenate([chunk, np.repeat(chunk[-1:], pad, axis=0)])
        out.append((start, chunk))
    return out


def reassemble_windows(
    window_probs: list[tuple[int, np.ndarray]], num_frames: int
) -> np.ndarray:
    """Stitch per-window [window, 2] probabilities back to [T, 2].

    Padded tail positions are dropped; where windows overlap, the earliest
    window's prediction wins so every frame gets exactly one prediction.
    """
    out = np.full((num_frames, 2), np.nan, dtype=np.float64)
    filled = np.zeros(num_frames, dtype=bool)
    for start, probs in window_probs:
        for i in range(probs.shape[0]):
            frame = start + i
            if frame >= num_frames:
                break
            if not filled[frame]:
                out[frame] = probs[i]
                filled[frame] = True
    if not filled.all():
        missing = np.flatnonzero(~filled)[:5]
        raise ValueError(f"windows do not cover all frames (first missing: {missing})")
    return out


def decode_events(
    probs: np.ndarray, threshold: float = 0.5, min_separation: int = 2
) -> list[int]:
    """Decode discrete audible frames from [T, 2] probability rows.

    Candidates are frames whose sound-class probability reaches the
    threshold; they are selected greedily in descending probability and any
    remaining candidate closer than min_separation to a selected event is
    suppressed.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise ValueError(f"probs must be [T, 2], got {probs.shape}")
    p_sound = probs[:, 1]
    candidates = np.flatnonzero(p_sound >= threshold)
    # descending probability, ties broken by earlier frame
    order = sorted(candidates, key=lambda t: (-p_sound[t], t))
    selected: list[int] = []
    for t in order:
        if all(abs(t - s) >= min_separation for s in selected):
            selected.append(int(t))
    return sorted(selected)
