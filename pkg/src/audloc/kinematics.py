"""Bidirectional motion flow and inflectional flow.

The inflectional flow is the elementwise frame-to-frame difference of
motion flow, a discrete second derivative of position; it spikes where an
object's velocity changes abruptly (collisions). Flow can come from three
backends: exact analytic fields (synthetic scenes), a built-in classical
pyramidal estimator, or precomputed binary files.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import cv2
import numpy as np

from .data import DatasetError

FLOW_MAGIC = b"IFLX"
FLOW_VERSION = 1


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement [H, W, 2] (dx, dy) between adjacent frames."""

    flow: np.ndarray
    direction: str  # "forward" | "backward"
    src_frame: int
    dst_frame: int

    def __post_init__(self):
        flow = np.ascontiguousarray(np.asarray(self.flow, dtype=np.float32))
        if flow.ndim != 3 or flow.shape[2] != 2:
            raise ValueError(f"flow must be [H, W, 2], got {flow.shape}")
        if not np.isfinite(flow).all():
            raise ValueError("flow entries must be finite")
        if self.direction == "forward":
            if self.dst_frame != self.src_frame + 1:
                raise ValueError("forward flow requires dst_frame == src_frame + 1")
        elif self.direction == "backward":
            if self.dst_frame != self.src_frame - 1:
                raise ValueError("backward flow requires dst_frame == src_frame - 1")
        else:
            raise ValueError(f"direction must be forward or backward, got {self.direction!r}")
        flow.flags.writeable = False
        object.__setattr__(self, "flow", flow)


@dataclass(frozen=True)
class InflectionField:
    """Elementwise difference of two consecutive same-direction flows."""

    inflect: np.ndarray
    direction: str
    anchor_frame: int

    def __post_init__(self):
        inflect = np.ascontiguousarray(np.asarray(self.inflect, dtype=np.float32))
        if inflect.ndim != 3 or inflect.shape[2] != 2:
            raise ValueError(f"inflect must be [H, W, 2], got {inflect.shape}")
        if not np.isfinite(inflect).all():
            raise ValueError("inflect entries must be finite")
        inflect.flags.writeable = False
        object.__setattr__(self, "inflect", inflect)


@dataclass(frozen=True)
class KinematicPrior:
    """Motion and inflection fields for the interior frames of one video.

    Arrays are stacked [n, H, W, 2] and aligned with `frames`, the retained
    interior frame indices 1 .. T-2 (the first and last frame are trimmed
    because they lack one of the bidirectional flows).
    """

    frames: np.ndarray  # [n] interior frame indices
    v_fwd: np.ndarray  # flow frame i -> i+1
    v_bwd: np.ndarray  # flow frame i -> i-1
    a_fwd: np.ndarray  # forward inflection, anchor i-1
    a_bwd: np.ndarray  # backward inflection, anchor i

    def __post_init__(self):
        n = self.frames.shape[0]
        for name in ("v_fwd", "v_bwd", "a_fwd", "a_bwd"):
            arr = getattr(self, name)
            if arr.shape[0] != n or arr.ndim != 4 or arr.shape[3] != 2:
                raise ValueError(f"{name} must be [n, H, W, 2] aligned with frames")


# ---------------------------------------------------------------------------
# Flow backends
# ---------------------------------------------------------------------------


class AnalyticBackend:
    """Serves precomputed exact flow fields (from synth.analytic_flow)."""

    name = "analytic"

    def __init__(self, forward: list[FlowField], backward: list[FlowField]):
        if len(forward) != len(backward):
            raise ValueError("forward and backward field lists must have equal length")
        self.forward = list(forward)
        self.backward = list(backward)

    def compute(self, frames: np.ndarray) -> tuple[list[FlowField], list[FlowField]]:
        if frames.shape[0] - 1 != len(self.forward):
            raise ValueError(
                f"analytic backend holds {len(self.forward)} field pairs but the "
                f"video has {frames.shape[0]} frames"
            )
        return self.forward, self.backward


class FileBackend:
    """Loads flow_fwd_%06d.bin / flow_bwd_%06d.bin from a directory."""

    name = "file"

    def __init__(self, flow_dir: str | os.PathLike):
        self.flow_dir = os.fspath(flow_dir)

    def compute(self, frames: np.ndarray) -> tuple[list[FlowField], list[FlowField]]:
        t = frames.shape[0]
        fwd, bwd = [], []
        for i in range(t - 1):
            f = read_flow_file(os.path.join(self.flow_dir, f"flow_fwd_{i:06d}.bin"))
            b = read_flow_file(os.path.join(self.flow_dir, f"flow_bwd_{i:06d}.bin"))
            fwd.append(FlowField(flow=f, direction="forward", src_frame=i, dst_frame=i + 1))
            bwd.append(FlowField(flow=b, direction="backward", src_frame=i + 1, dst_frame=i))
        return fwd, bwd


_AVG_KERNEL = np.array(
    [[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]], dtype=np.float32
)


class ClassicalBackend:
    """Pyramidal gradient-based estimator (brightness constancy + quadratic
    smoothness, fixed-point iteration). Deterministic and CPU-cheap; it
    never fails, only degrades on hard inputs.

    The data term aggregates per-channel brightness-constancy constraints
    into a Gaussian-smoothed structure tensor (window radius `window`),
    which carries edge evidence into untextured interiors, and is
    normalized to unit mean trace so `smoothness` is contrast-invariant.
    Each pyramid level runs a few warp refinements around the fixed-point
    solve of the 2x2 per-pixel system.
    """

    name = "classical"

    def __init__(
        self,
        levels: int = 3,
        iterations: int = 30,
        smoothness: float = 0.1,
        window: float = 3.0,
        warps: int = 3,
        presmooth: float = 1.0,
    ):
        self.levels = levels
        self.iterations = iterations
        self.smoothness = smoothness
        self.window = window
        self.warps = warps
        self.presmooth = presmooth
        self.last_energy_traces: list[list[float]] = []

    def compute(self, frames: np.ndarray) -> tuple[list[FlowField], list[FlowField]]:
        self.last_energy_traces = []
        frames = frames.astype(np.float32)
        fwd, bwd = [], []
        for i in range(frames.shape[0] - 1):
            f = self._pair(frames[i], frames[i + 1])
            b = self._pair(frames[i + 1], frames[i])
            fwd.append(FlowField(flow=f, direction="forward", src_frame=i, dst_frame=i + 1))
            bwd.append(FlowField(flow=b, direction="backward", src_frame=i + 1, dst_frame=i))
        return fwd, bwd

    def _pair(self, im1: np.ndarray, im2: np.ndarray) -> np.ndarray:
        if self.presmooth > 0:
            im1 = cv2.GaussianBlur(im1, (0, 0), self.presmooth)
            im2 = cv2.GaussianBlur(im2, (0, 0), self.presmooth)
        pyr1 = [im1]
        pyr2 = [im2]
        for _ in range(self.levels - 1):
            if min(pyr1[-1].shape[:2]) < 16:
                break
            pyr1.append(cv2.resize(pyr1[-1], None, fx=0.5, fy=0.5, interpolation=cv2.INTER_AREA))
            pyr2.append(cv2.resize(pyr2[-1], None, fx=0.5, fy=0.5, interpolation=cv2.INTER_AREA))
        h, w = pyr1[-1].shape[:2]
        u = np.zeros((h, w), dtype=np.float32)
        v = np.zeros((h, w), dtype=np.float32)
        for level in range(len(pyr1) - 1, -1, -1):
            a, b = pyr1[level], pyr2[level]
            if u.shape != a.shape[:2]:
                u = cv2.resize(u, (a.shape[1], a.shape[0])) * 2.0
                v = cv2.resize(v, (a.shape[1], a.shape[0])) * 2.0
            for _ in range(self.warps):
                b_warp = self._warp(b, u, v)
                du, dv, trace = self._iterate(a, b_warp)
                u = u + du
                v = v + dv
                self.last_energy_traces.append(trace)
        return np.stack([u, v], axis=-1).astype(np.float32)

    @staticmethod
    def _warp(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        h, w = img.shape[:2]
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float32)
        return cv2.remap(
            img, xs + u, ys + v, interpolation=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
        )

    def _tensor(self, im1: np.ndarray, im2: np.ndarray) -> list[np.ndarray]:
        if im1.ndim == 2:
            im1 = im1[..., None]
            im2 = im2[..., None]
        j = [np.zeros(im1.shape[:2], dtype=np.float32) for _ in range(6)]
        for c in range(im1.shape[2]):
            a, b = im1[..., c], im2[..., c]
            ix = 0.5 * (
                cv2.Sobel(a, cv2.CV_32F, 1, 0, ksize=3) + cv2.Sobel(b, cv2.CV_32F, 1, 0, ksize=3)
            ) / 8.0
            iy = 0.5 * (
                cv2.Sobel(a, cv2.CV_32F, 0, 1, ksize=3) + cv2.Sobel(b, cv2.CV_32F, 0, 1, ksize=3)
            ) / 8.0
            it = b - a
            j[0] += ix * ix
            j[1] += ix * iy
            j[2] += iy * iy
            j[3] += ix * it
            j[4] += iy * it
            j[5] += it * it
        j = [cv2.GaussianBlur(z, (0, 0), self.window) for z in j]
        scale = float(np.mean(j[0] + j[2]))
        if scale > 1e-12:
            j = [z / scale for z in j]
        return j

    def _iterate(
        self, im1: np.ndarray, im2: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, list[float]]:
        j11, j12, j22, j13, j23, j33 = self._tensor(im1, im2)
        alpha = self.smoothness
        u = np.zeros(im1.shape[:2], dtype=np.float32)
        v = np.zeros_like(u)
        a11 = alpha + j11
        a22 = alpha + j22
        det = a11 * a22 - j12 * j12
        trace = [self._energy(j11, j12, j22, j13, j23, j33, u, v, alpha)]
        for _ in range(self.iterations):
            u_avg = cv2.filter2D(u, -1, _AVG_KERNEL, borderType=cv2.BORDER_REPLICATE)
            v_avg = cv2.filter2D(v, -1, _AVG_KERNEL, borderType=cv2.BORDER_REPLICATE)
            b1 = alpha * u_avg - j13
            b2 = alpha * v_avg - j23
            u_new = (a22 * b1 - j12 * b2) / det
            v_new = (a11 * b2 - j12 * b1) / det
            energy = self._energy(j11, j12, j22, j13, j23, j33, u_new, v_new, alpha)
            if energy > trace[-1]:
                break  # keep the fixed-point iteration energy-monotone
            u, v = u_new, v_new
            trace.append(energy)
        return u, v, trace

    @staticmethod
    def _energy(j11, j12, j22, j13, j23, j33, u, v, alpha) -> float:
        data = j11 * u * u + 2 * j12 * u * v + j22 * v * v + 2 * j13 * u + 2 * j23 * v + j33
        gux, guy = np.gradient(u)
        gvx, gvy = np.gradient(v)
        smooth = gux**2 + guy**2 + gvx**2 + gvy**2
        return float(data.sum() + alpha * smooth.sum())


def estimate_flow(frames: np.ndarray, backend) -> tuple[list[FlowField], list[FlowField]]:
    """Compute forward (t -> t+1) and backward (t+1 -> t) flow lists."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[0] < 2:
        raise ValueError(f"frames must be [T>=2, H, W, 3], got {frames.shape}")
    fwd, bwd = backend.compute(frames)
    t = frames.shape[0]
    if len(fwd) != t - 1 or len(bwd) != t - 1:
        raise ValueError(
            f"backend produced {len(fwd)}/{len(bwd)} fields, expected {t - 1} each"
        )
    return fwd, bwd


# ---------------------------------------------------------------------------
# Inflectional flow and the per-frame kinematic prior
# ---------------------------------------------------------------------------


def inflectional_flow(v_prev: FlowField, v_next: FlowField) -> InflectionField:
    """Elementwise difference of consecutive same-direction flow fields."""
    if v_prev.direction != v_next.direction:
        raise ValueError(
            f"direction mismatch: {v_prev.direction} vs {v_next.direction}"
        )
    if v_prev.flow.shape != v_next.flow.shape:
        raise ValueError(
            f"shape mismatch: {v_prev.flow.shape} vs {v_next.flow.shape}"
        )
    if v_next.src_frame != v_prev.src_frame + 1:
        raise ValueError(
            f"expected v_next.src_frame == v_prev.src_frame + 1, got "
            f"{v_next.src_frame} after {v_prev.src_frame}"
        )
    return InflectionField(
        inflect=v_next.flow - v_prev.flow,
        direction=v_prev.direction,
        anchor_frame=v_prev.src_frame,
    )


def build_kinematic_prior(frames: np.ndarray, backend) -> KinematicPrior:
    """Assemble motion and inflection fields for every interior frame.

    For frame i in 1 .. T-2: forward motion is flow(i -> i+1), backward
    motion is flow(i -> i-1), forward inflection is flow(i -> i+1) minus
    flow(i-1 -> i), and backward inflection is its time-mirrored analog.
    """
    frames = np.asarray(frames)
    if frames.shape[0] < 3:
        raise ValueError(f"need at least 3 frames, got {frames.shape[0]}")
    fwd, bwd = estimate_flow(frames, backend)
    t = frames.shape[0]
    idx = np.arange(1, t - 1)
    v_fwd = np.stack([fwd[i].flow for i in idx])
    v_bwd = np.stack([bwd[i - 1].flow for i in idx])
    a_fwd = np.stack(
        [inflectional_flow(fwd[i - 1], fwd[i]).inflect for i in idx]
    )
    # backward flows indexed by src frame run i, i+1; mirror of the forward rule
    a_bwd = np.stack([bwd[i].flow - bwd[i - 1].flow for i in idx])
    return KinematicPrior(frames=idx, v_fwd=v_fwd, v_bwd=v_bwd, a_fwd=a_fwd, a_bwd=a_bwd)


def resize_flow(flow: np.ndarray, size: int) -> np.ndarray:
    """Area-average a [H, W, 2] flow to size x size, rescaling displacements
    into the new pixel units."""
    h, w = flow.shape[:2]
    out = cv2.resize(flow, (size, size), interpolation=cv2.INTER_AREA)
    out = out.astype(np.float32)
    out[..., 0] *= size / w
    out[..., 1] *= size / h
    return out


# ---------------------------------------------------------------------------
# Binary flow file format: magic "IFLX", u32 version, u32 H, u32 W, then
# H*W*2 little-endian float32 (dx, dy interleaved per pixel, row-major).
# ---------------------------------------------------------------------------


def write_flow_file(flow: np.ndarray, path: str | os.PathLike) -> None:
    flow = np.ascontiguousarray(np.asarray(flow, dtype="<f4"))
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be [H, W, 2], got {flow.shape}")
    h, w = flow.shape[:2]
    header = FLOW_MAGIC + struct.pack("<III", FLOW_VERSION, h, w)
    from .data import write_atomic

    write_atomic(path, header + flow.tobytes())


def read_flow_file(path: str | os.PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError as exc:
        raise DatasetError(f"flow file not found: {path}") from exc
    if len(raw) < 16 or raw[:4] != FLOW_MAGIC:
        raise DatasetError(f"not a flow file (bad magic): {path}")
    version, h, w = struct.unpack("<III", raw[4:16])
    if version != FLOW_VERSION:
        raise DatasetError(f"unsupported flow file version {version}: {path}")
    expected = 16 + h * w * 2 * 4
    if len(raw) != expected:
        raise DatasetError(
            f"corrupt flow file: {path} has {len(raw)} bytes, expected {expected}"
        )
    flow = np.frombuffer(raw, dtype="<f4", offset=16).reshape(h, w, 2)
    return np.ascontiguousarray(flow)
