"""Physics-based synthetic benchmark: balls bouncing in a box.

Produces videos with analytically known collision frames and exact
per-pixel ground-truth flow, plus annotation files in the data module's
schema. Collision frames become the audible-action keyframes.

Coordinates are (x, y) in pixels with x along the width axis and y along
the height axis (downwards); gravity therefore acts in +y.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import cv2
import numpy as np

from .data import AnnotationTrack, VideoSequence, save_annotations, save_video_frames
from .kinematics import FlowField, write_flow_file

_CONTACT_EPS = 1e-9

_PALETTE = np.array(
    [
        [0.90, 0.25, 0.20],
        [0.20, 0.45, 0.90],
        [0.95, 0.80, 0.15],
        [0.25, 0.75, 0.35],
        [0.75, 0.30, 0.80],
        [0.95, 0.55, 0.15],
    ]
)


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic description of one bouncing-ball scene."""

    num_balls: int
    radius_px: float
    restitution: float
    gravity: float
    init_positions: tuple[tuple[float, float], ...]
    init_velocities: tuple[tuple[float, float], ...]
    T: int
    H: int
    W: int
    rng_seed: int

    def __post_init__(self):
        if self.num_balls < 1:
            raise ValueError("num_balls must be >= 1")
        if self.radius_px <= 0:
            raise ValueError("radius_px must be positive")
        if not (0.0 < self.restitution <= 1.0):
            raise ValueError("restitution must lie in (0, 1]")
        if self.gravity < 0:
            raise ValueError("gravity must be non-negative")
        if self.T < 3:
            raise ValueError("T must be >= 3")
        if len(self.init_positions) != self.num_balls:
            raise ValueError("init_positions length must equal num_balls")
        if len(self.init_velocities) != self.num_balls:
            raise ValueError("init_velocities length must equal num_balls")
        r = self.radius_px
        for i, (x, y) in enumerate(self.init_positions):
            if not (r - _CONTACT_EPS <= x <= self.W - r + _CONTACT_EPS) or not (
                r - _CONTACT_EPS <= y <= self.H - r + _CONTACT_EPS
            ):
                raise ValueError(
                    f"ball {i} initial position ({x}, {y}) closer than radius to a wall"
                )
        vmax = min(self.H, self.W) / 4.0
        for i, (vx, vy) in enumerate(self.init_velocities):
            if np.hypot(vx, vy) >= vmax:
                raise ValueError(
                    f"ball {i} initial speed {np.hypot(vx, vy):.2f} exceeds "
                    f"the displacement bound {vmax:.2f} px/frame"
                )

    @property
    def positions_array(self) -> np.ndarray:
        return np.asarray(self.init_positions, dtype=np.float64)

    @property
    def velocities_array(self) -> np.ndarray:
        return np.asarray(self.init_velocities, dtype=np.float64)


@dataclass(frozen=True)
class Trajectory:
    """Simulated ball states plus the exact collision-event record.

    velocities[t] equals positions[t+1] - positions[t] on every step that
    is not a collision step.
    """

    positions: np.ndarray  # [T, num_balls, 2]
    velocities: np.ndarray  # [T, num_balls, 2]
    collision_frames: list[int]
    collision_locations: list[tuple[float, float]]

    @property
    def num_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def keyframes(self) -> list[int]:
        return sorted(set(self.collision_frames))


def simulate(spec: SceneSpec) -> Trajectory:
    """Run a discrete-time simulation at one step per frame.

    Wall bounces reflect the into-wall velocity component scaled by the
    restitution; ball-ball contacts exchange the along-normal components
    (equal-mass elastic). The collision impulse replaces the gravity update
    on a ball's bounce step, so free flight stays exactly parabolic between
    recorded collision frames. A collision is recorded at the first frame
    of contact or interpenetration; penetrating positions are projected
    back to contact.
    """
    n = spec.num_balls
    r = spec.radius_px
    pos = np.zeros((spec.T, n, 2))
    pos[0] = spec.positions_array
    vel_state = spec.velocities_array.copy()
    collision_frames: list[int] = []
    collision_locations: list[tuple[float, float]] = []

    # walls a ball is currently pressed against, per axis: -1 low, +1 high, 0 none
    wall_contact = np.zeros((n, 2), dtype=np.int64)
    pair_contacts: list[tuple[int, int, np.ndarray]] = []
    lo = np.array([r, r])
    hi = np.array([spec.W - r, spec.H - r])

    for t in range(spec.T - 1):
        impulsed = np.zeros(n, dtype=bool)
        for i, j, normal in pair_contacts:
            # equal-mass elastic exchange of the along-normal components
            ui = vel_state[i] @ normal
            uj = vel_state[j] @ normal
            if ui - uj > _CONTACT_EPS:  # approaching along the normal
                e = spec.restitution
                mean = 0.5 * (ui + uj)
                vel_state[i] += (mean + 0.5 * e * (uj - ui) - ui) * normal
                vel_state[j] += (mean + 0.5 * e * (ui - uj) - uj) * normal
                impulsed[i] = impulsed[j] = True
        for b in range(n):
            bounced = False
            for axis in range(2):
                side = wall_contact[b, axis]
                v_axis = vel_state[b, axis]
                if side != 0 and v_axis * side > _CONTACT_EPS:
                    vel_state[b, axis] = -spec.restitution * v_axis
                    bounced = True
            if not bounced and not impulsed[b]:
                vel_state[b, 1] += spec.gravity

        new_pos = pos[t] + vel_state

        # detect wall contact / penetration at the new positions
        wall_contact[:] = 0
        hit: set[int] = set()
        for b in range(n):
            for axis, (low, high) in enumerate(zip(lo, hi)):
                if new_pos[b, axis] <= low + _CONTACT_EPS:
                    new_pos[b, axis] = low
                    wall_contact[b, axis] = -1
                    if vel_state[b, axis] < -_CONTACT_EPS:
                        hit.add(b)
                elif new_pos[b, axis] >= high - _CONTACT_EPS:
                    new_pos[b, axis] = high
                    wall_contact[b, axis] = 1
                    if vel_state[b, axis] > _CONTACT_EPS:
                        hit.add(b)

        # detect ball-ball contact / penetration
        pair_contacts = []
        for i in range(n):
            for j in range(i + 1, n):
                delta = new_pos[j] - new_pos[i]
                dist = float(np.hypot(*delta))
                if dist <= 2 * r + _CONTACT_EPS:
                    normal = delta / dist if dist > 0 else np.array([1.0, 0.0])
                    overlap = 2 * r - dist
                    if overlap > 0:
                        new_pos[i] -= 0.5 * overlap * normal
                        new_pos[j] += 0.5 * overlap * normal
                    approach = (vel_state[i] - vel_state[j]) @ normal
                    if approach > _CONTACT_EPS:
                        pair_contacts.append((i, j, normal))
                        hit.add(i)
                        hit.add(j)

        pos[t + 1] = new_pos
        for b in sorted(hit):
            collision_frames.append(t + 1)
            collision_locations.append((float(new_pos[b, 0]), float(new_pos[b, 1])))

    displ = np.zeros_like(pos)
    displ[:-1] = pos[1:] - pos[:-1]
    displ[-1] = vel_state
    return Trajectory(
        positions=pos,
        velocities=displ,
        collision_frames=collision_frames,
        collision_locations=collision_locations,
    )


def _disk_mask(h: int, w: int, cx: float, cy: float, r: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def _background(spec: SceneSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.rng_seed)
    coarse = rng.uniform(0.0, 1.0, size=(max(spec.H // 8, 2), max(spec.W // 8, 2), 3))
    tex = cv2.resize(coarse, (spec.W, spec.H), interpolation=cv2.INTER_LINEAR)
    fine = rng.uniform(-1.0, 1.0, size=(spec.H, spec.W, 3))
    img = 0.30 + 0.30 * tex + 0.06 * fine
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render(traj: Trajectory, spec: SceneSpec, video_id: str = "scene") -> VideoSequence:
    """Render anti-aliased disks over a deterministic textured background."""
    bg = _background(spec)
    ys, xs = np.mgrid[0 : spec.H, 0 : spec.W]
    frames = np.empty((traj.num_frames, spec.H, spec.W, 3), dtype=np.float32)
    for t in range(traj.num_frames):
        img = bg.copy()
        for b in range(spec.num_balls):
            cx, cy = traj.positions[t, b]
            dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
            alpha = np.clip(spec.radius_px + 0.5 - dist, 0.0, 1.0)[..., None]
            color = _PALETTE[b % len(_PALETTE)].astype(np.float32)
            img = (1.0 - alpha) * img + alpha * color
        frames[t] = img
    return VideoSequence(id=video_id, frames=frames, fps=25.0)


def analytic_flow(
    traj: Trajectory, spec: SceneSpec, direction: str = "forward"
) -> list[FlowField]:
    """Exact per-pixel flow: the ball displacement inside each disk footprint.

    Forward fields map frame t to t+1 and paint positions[t+1]-positions[t]
    inside the disk at frame t; backward fields map t+1 to t with the
    negated displacement painted at the frame-t+1 footprint.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be forward or backward, got {direction!r}")
    fields = []
    for t in range(traj.num_frames - 1):
        flow = np.zeros((spec.H, spec.W, 2), dtype=np.float32)
        for b in range(spec.num_balls):
            d = traj.positions[t + 1, b] - traj.positions[t, b]
            if direction == "forward":
                cx, cy = traj.positions[t, b]
            else:
                cx, cy = traj.positions[t + 1, b]
                d = -d
            mask = _disk_mask(spec.H, spec.W, cx, cy, spec.radius_px)
            flow[mask] = d.astype(np.float32)
        if direction == "forward":
            fields.append(FlowField(flow=flow, direction="forward", src_frame=t, dst_frame=t + 1))
        else:
            fields.append(FlowField(flow=flow, direction="backward", src_frame=t + 1, dst_frame=t))
    return fields


def make_annotation(traj: Trajectory, video_id: str, fps: float = 25.0) -> AnnotationTrack:
    labels = np.zeros(traj.num_frames, dtype=np.int64)
    for k in traj.keyframes:
        labels[k] = 1
    return AnnotationTrack(video_id=video_id, labels=labels, fps=fps)


def export_dataset(
    specs: list[SceneSpec],
    out_dir: str | os.PathLike,
    ids: list[str] | None = None,
    write_flow: bool = False,
    fps: float = 25.0,
) -> list[str]:
    """Write a full dataset: frame directories, annotations, optional flow.

    Layout: <out>/annotations.json, <out>/frames/<id>/frame_%06d.png and,
    when requested, <out>/flow/<id>/flow_{fwd,bwd}_%06d.bin.
    """
    out_dir = os.fspath(out_dir)
    if ids is None:
        ids = [f"video_{i:04d}" for i in range(len(specs))]
    if len(ids) != len(specs):
        raise ValueError("ids length must match specs length")
    os.makedirs(out_dir, exist_ok=True)
    tracks = []
    for spec, vid in zip(specs, ids):
        traj = simulate(spec)
        video = render(traj, spec, video_id=vid)
        save_video_frames(video, os.path.join(out_dir, "frames", vid))
        tracks.append(make_annotation(traj, vid, fps=fps))
        if write_flow:
            flow_dir = os.path.join(out_dir, "flow", vid)
            os.makedirs(flow_dir, exist_ok=True)
            for fld in analytic_flow(traj, spec, "forward"):
                write_flow_file(
                    fld.flow, os.path.join(flow_dir, f"flow_fwd_{fld.src_frame:06d}.bin")
                )
            for fld in analytic_flow(traj, spec, "backward"):
                write_flow_file(
                    fld.flow, os.path.join(flow_dir, f"flow_bwd_{fld.dst_frame:06d}.bin")
                )
    save_annotations(tracks, os.path.join(out_dir, "annotations.json"))
    return ids


# ---------------------------------------------------------------------------
# Scene factories
#
# The factories keep collisions frame-aligned: straight-line segments use
# integer speeds that divide the travel spans, and parabolic flight uses the
# closed-form cycle y_j = j*s - g*j*(j-1)/2 which returns to contact after
# exactly k = 2s/g + 1 steps when s = g*(k-1)/2.
# ---------------------------------------------------------------------------


def make_bounce_spec(seed: int, T: int | None = None, size: int = 64) -> SceneSpec:
    """Single ball, zero gravity, diagonal speed, frame-exact wall bounces."""
    rng = np.random.default_rng(seed)
    r = 4
    span = size - 2 * r  # speeds below divide this span
    s = int(rng.choice([2, 4]))
    x0 = r + s * int(rng.integers(0, span // s + 1))
    y0 = r + s * int(rng.integers(0, span // s + 1))
    vx = s * int(rng.choice([-1, 1]))
    vy = s * int(rng.choice([-1, 1]))
    if T is None:
        T = int(rng.integers(40, 65))
    return SceneSpec(
        num_balls=1,
        radius_px=r,
        restitution=1.0,
        gravity=0.0,
        init_positions=((float(x0), float(y0)),),
        init_velocities=((float(vx), float(vy)),),
        T=T,
        H=size,
        W=size,
        rng_seed=seed,
    )


def make_gravity_spec(seed: int, T: int | None = None, size: int = 64) -> SceneSpec:
    """Single ball bouncing vertically under gravity with frame-exact impacts."""
    rng = np.random.default_rng(seed)
    r = 4
    g, k = [(0.25, 17), (0.5, 13), (1.0, 9)][int(rng.integers(0, 3))]
    s = g * (k - 1) / 2.0  # impact speed of the frame-aligned cycle
    floor = float(size - r)
    j0 = int(rng.integers(2, k - 1))  # start mid-flight, strictly off the floor
    y0 = floor - (j0 * s - g * j0 * (j0 - 1) / 2.0)
    v0 = -s + (j0 - 1) * g  # pre-gravity velocity so the first step lands on the cycle
    x0 = float(rng.integers(r + 4, size - r - 4))
    if T is None:
        T = int(rng.integers(40, 65))
    return SceneSpec(
        num_balls=1,
        radius_px=r,
        restitution=1.0,
        gravity=g,
        init_positions=((x0, y0),),
        init_velocities=((0.0, v0),),
        T=T,
        H=size,
        W=size,
        rng_seed=seed,
    )


def make_multi_spec(seed: int, T: int | None = None, size: int = 64) -> SceneSpec:
    """Two balls on one row, head-on elastic exchange plus wall bounces."""
    rng = np.random.default_rng(seed)
    r = 4
    span = size - 2 * r
    s = int(rng.choice([2, 4]))
    y = r + s * int(rng.integers(1, span // s))
    # start separated by a whole number of closing steps (closing speed 2s)
    gap_steps = int(rng.integers(2, 5))
    x1 = r + s * int(rng.integers(0, 3))
    x2 = x1 + 2 * r + 2 * s * gap_steps
    if x2 > size - r:
        x2 = size - r
        x1 = x2 - 2 * r - 2 * s * gap_steps
    if T is None:
        T = int(rng.integers(40, 65))
    return SceneSpec(
        num_balls=2,
        radius_px=r,
        restitution=1.0,
        gravity=0.0,
        init_positions=((float(x1), float(y)), (float(x2), float(y))),
        init_velocities=((float(s), 0.0), (float(-s), 0.0)),
        T=T,
        H=size,
        W=size,
        rng_seed=seed,
    )


_PRESETS = {
    "bounce": make_bounce_spec,
    "gravity": make_gravity_spec,
    "multi": make_multi_spec,
}


def preset_spec(preset: str, seed: int, **kwargs) -> SceneSpec:
    """Build a SceneSpec from a named preset (bounce, gravity, multi)."""
    try:
        factory = _PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(_PRESETS)}")
    return factory(seed, **kwargs)
