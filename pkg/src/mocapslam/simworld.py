"""Synthetic world: scenes, trajectories, camera and mocap streams.

Everything is derived deterministically from the scenario seed with
counter-based RNG keyed by (seed, frame, stream), so observation draws do
not depend on call order and per-point noise does not depend on which
points happen to be visible.

Conventions: world is z-up, units are meters, the mocap/world origin sits
at the initial root (pelvis) position. Camera rotation columns are
[right, down, forward]; camera frames run at 30 Hz on even 60 Hz ticks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from .camera import CameraIntrinsics
from .liegroup import RigidPose, exp_so3, log_so3

TICK_RATE = 60.0
DT = 1.0 / TICK_RATE
CAMERA_EVERY = 2  # camera frames on even ticks: 30 Hz

# RNG stream tags.
_S_SCENE = 3
_S_DROPOUT = 0
_S_OUTLIER = 1
_S_PIXNOISE = 2
_S_DRIFT_T = 4
_S_DRIFT_R = 5
_S_ACCEL = 6

Z_NEAR = 0.10
MAX_RANGE = 80.0
PIX_MARGIN = 1.0
LEVEL_BASE_DEPTH = 0.8
LEVEL_RATIO = 1.45
N_LEVELS = 8


class TooShort(ValueError):
    """Input sequence too short for the requested derivation."""


def rng_for(seed: int, frame: int, stream: int) -> np.random.Generator:
    """Counter-based generator: independent of draw order elsewhere."""
    ss = np.random.SeedSequence(entropy=(int(seed), int(frame), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class MatchSet:
    """Feature matches for one camera frame (empty when occluded)."""

    frame: int
    timestamp: float
    ids: np.ndarray      # (k,) scene point ids
    pixels: np.ndarray   # (k,2)
    levels: np.ndarray   # (k,) pyramid level per match

    def __len__(self):
        return len(self.ids)


@dataclass
class MocapFrame:
    """One 60 Hz mocap sample: drifting camera pose plus body channels."""

    index: int
    timestamp: float
    cam_pose: RigidPose        # noisy/drifting camera pose estimate
    root_pos: np.ndarray       # drifting root position
    root_accel: np.ndarray     # noisy global root acceleration
    root_to_cam: np.ndarray    # body-accurate camera offset from the root


@dataclass
class Scenario:
    """Fully realized synthetic sequence."""

    name: str
    kind: str
    seed: int
    intrinsics: CameraIntrinsics
    scene_points: np.ndarray            # (N,3)
    occluders: Optional[np.ndarray]     # (S,2,2) plan-view wall segments
    times: np.ndarray                   # (T,)
    cam_R: np.ndarray                   # (T,3,3)
    cam_t: np.ndarray                   # (T,3)
    root_pos: np.ndarray                # (T,3)
    root_vel: np.ndarray
    root_accel: np.ndarray
    root_to_cam: np.ndarray
    pixel_sigma: float
    outlier_rate: float
    match_dropout: float
    drift_translation_sigma: float      # m / sqrt(s) random walk
    drift_rotation_sigma: float         # rad, per-frame
    accel_sigma: float                  # m/s^2, per-frame
    occlusion_windows: list
    max_matches: int
    spec: dict = field(default_factory=dict)

    @property
    def n_ticks(self) -> int:
        return len(self.times)

    def camera_pose(self, k: int) -> RigidPose:
        return RigidPose(self.cam_R[k], self.cam_t[k])

    def camera_frames(self) -> range:
        return range(0, self.n_ticks, CAMERA_EVERY)

    def is_occluded(self, k: int) -> bool:
        t = self.times[k]
        return any(t0 <= t < t1 for t0, t1 in self.occlusion_windows)


# ---------------------------------------------------------------------------
# path tables


def _smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _ellipse_table(a, b, n=4000):
    phi = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    return np.stack([a * np.cos(phi), b * np.sin(phi)], axis=1), True


def _circle_table(r, n=4000):
    return _ellipse_table(r, r, n)


def _rounded_rect_table(qx, qy, rc, n=4000):
    """CCW rounded rectangle with half-extents (qx, qy), corner radius rc."""
    if rc > min(qx, qy):
        raise ValueError("corner radius exceeds rectangle half-extent")
    sx, sy = qx - rc, qy - rc
    straight = [2 * sx, 2 * sy, 2 * sx, 2 * sy]
    arc = 0.5 * np.pi * rc
    total = sum(straight) + 4 * arc
    s_vals = np.linspace(0.0, total, n, endpoint=False)
    pts = np.zeros((n, 2))
    for i, s in enumerate(s_vals):
        if s < 2 * sx:  # bottom, left to right
            pts[i] = (-sx + s, -qy)
            continue
        s -= 2 * sx
        if s < arc:  # bottom-right corner
            ang = -0.5 * np.pi + s / rc
            pts[i] = (sx + rc * np.cos(ang), -sy + rc * np.sin(ang))
            continue
        s -= arc
        if s < 2 * sy:  # right, upward
            pts[i] = (qx, -sy + s)
            continue
        s -= 2 * sy
        if s < arc:  # top-right corner
            ang = s / rc
            pts[i] = (sx + rc * np.cos(ang), sy + rc * np.sin(ang))
            continue
        s -= arc
        if s < 2 * sx:  # top, right to left
            pts[i] = (sx - s, qy)
            continue
        s -= 2 * sx
        if s < arc:  # top-left corner
            ang = 0.5 * np.pi + s / rc
            pts[i] = (-sx + rc * np.cos(ang), sy + rc * np.sin(ang))
            continue
        s -= arc
        if s < 2 * sy:  # left, downward
            pts[i] = (-qx, sy - s)
            continue
        s -= 2 * sy
        ang = np.pi + s / rc  # bottom-left corner
        pts[i] = (-sx + rc * np.cos(ang), -sy + rc * np.sin(ang))
    return pts, True


def _octagon(qx, qy, cut):
    """Plan-view occluder ring approximating a rounded rectangle."""
    return np.array([
        [(-qx + cut, -qy), (qx - cut, -qy)],
        [(qx - cut, -qy), (qx, -qy + cut)],
        [(qx, -qy + cut), (qx, qy - cut)],
        [(qx, qy - cut), (qx - cut, qy)],
        [(qx - cut, qy), (-qx + cut, qy)],
        [(-qx + cut, qy), (-qx, qy - cut)],
        [(-qx, qy - cut), (-qx, -qy + cut)],
        [(-qx, -qy + cut), (-qx + cut, -qy)],
    ])


# ---------------------------------------------------------------------------
# scene generation


def generate_scene(kind: str, params: dict, seed: int):
    """Return (points (N,3), occluders or None) in unshifted scene coords."""
    rng = rng_for(seed, 0, _S_SCENE)
    if kind == "room":
        pts = _room_scene(params, rng)
        occ = None
    elif kind == "corridor-loop":
        pts, occ = _corridor_scene(params, rng)
    elif kind == "outdoor-sparse":
        pts = _outdoor_scene(params, rng)
        occ = None
    else:
        raise ValueError(f"unknown scenario kind {kind!r}")
    pts = pts[rng.permutation(len(pts))]
    return pts, occ


def _room_scene(params, rng):
    ex, ey = params.get("half_x", 3.5), params.get("half_y", 3.5)
    floor_z = -params.get("root_height", 1.0)
    ceil_z = floor_z + params.get("room_height", 3.0)
    n = params.get("n_points", 1200)
    n_far = params.get("far_points", 60)
    walls = []
    # Four walls, ceiling, floor; allocation proportional to area.
    areas = np.array([2 * ey * (ceil_z - floor_z)] * 2
                     + [2 * ex * (ceil_z - floor_z)] * 2
                     + [4 * ex * ey] * 2, dtype=float)
    counts = np.maximum((areas / areas.sum() * n * 0.8).astype(int), 8)
    u = lambda k, lo, hi: rng.uniform(lo, hi, size=k)
    k = counts[0]
    walls.append(np.stack([np.full(k, ex), u(k, -ey, ey), u(k, floor_z, ceil_z)], 1))
    k = counts[1]
    walls.append(np.stack([np.full(k, -ex), u(k, -ey, ey), u(k, floor_z, ceil_z)], 1))
    k = counts[2]
    walls.append(np.stack([u(k, -ex, ex), np.full(k, ey), u(k, floor_z, ceil_z)], 1))
    k = counts[3]
    walls.append(np.stack([u(k, -ex, ex), np.full(k, -ey), u(k, floor_z, ceil_z)], 1))
    k = counts[4]
    walls.append(np.stack([u(k, -ex, ex), u(k, -ey, ey), np.full(k, ceil_z)], 1))
    k = counts[5]
    walls.append(np.stack([u(k, -ex, ex), u(k, -ey, ey), np.full(k, floor_z)], 1))
    n_clutter = max(n - sum(counts), 0)
    clutter = np.stack([u(n_clutter, -ex + 0.8, ex - 0.8),
                        u(n_clutter, -ey + 0.8, ey - 0.8),
                        u(n_clutter, floor_z + 0.3, ceil_z - 0.3)], 1)
    # Distant cluster past the +x wall: low-parallax landmarks.
    far = np.stack([u(n_far, 25.0, 60.0), u(n_far, -12.0, 12.0),
                    u(n_far, -2.0, 6.0)], 1)
    return np.concatenate(walls + [clutter, far])


def _corridor_scene(params, rng):
    qx = params.get("half_x", 5.0)
    qy = params.get("half_y", 3.0)
    half_w = 0.5 * params.get("corridor_width", 2.0)
    rc = params.get("corner_radius", 1.2)
    floor_z = -params.get("root_height", 1.0)
    ceil_z = floor_z + params.get("room_height", 2.8)
    n = params.get("n_points", 1300)
    n_ring = int(n * 0.42)
    inner, _ = _rounded_rect_table(qx - half_w, qy - half_w, max(rc - half_w, 0.2),
                                   n_ring)
    outer, _ = _rounded_rect_table(qx + half_w, qy + half_w, rc + half_w, n_ring)
    z_in = rng.uniform(floor_z, ceil_z, size=n_ring)
    z_out = rng.uniform(floor_z, ceil_z, size=n_ring)
    inner3 = np.column_stack([inner, z_in])
    outer3 = np.column_stack([outer, z_out])
    n_floor = n - 2 * n_ring
    center, _ = _rounded_rect_table(qx, qy, rc, n_floor)
    lateral = rng.uniform(-half_w * 0.9, half_w * 0.9, size=n_floor)
    # Offset floor points sideways from the centerline.
    tang = np.gradient(center, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normal = np.stack([-tang[:, 1], tang[:, 0]], 1)
    floor_pts = np.column_stack([center + normal * lateral[:, None],
                                 np.full(n_floor, floor_z)])
    occ = _octagon(qx - half_w, qy - half_w, max(rc - half_w, 0.2))
    return np.concatenate([inner3, outer3, floor_pts]), occ


def _outdoor_scene(params, rng):
    n = params.get("n_points", 700)
    floor_z = -params.get("root_height", 1.0)
    n_ground = int(n * 0.6)
    r = rng.uniform(0.0, 1.0, n_ground) ** 0.5 * params.get("ground_radius", 25.0)
    ang = rng.uniform(0.0, 2 * np.pi, n_ground)
    ground = np.stack([r * np.cos(ang), r * np.sin(ang),
                       np.full(n_ground, floor_z)], 1)
    n_posts = n - n_ground - params.get("far_points", 50)
    centers = rng.uniform(-18.0, 18.0, size=(12, 2))
    idx = rng.integers(0, len(centers), size=n_posts)
    posts = np.column_stack([
        centers[idx] + rng.normal(scale=0.4, size=(n_posts, 2)),
        rng.uniform(floor_z, floor_z + 5.0, size=n_posts)])
    n_far = params.get("far_points", 50)
    ang = rng.uniform(0.0, 2 * np.pi, n_far)
    dist = rng.uniform(40.0, 80.0, n_far)
    far = np.stack([dist * np.cos(ang), dist * np.sin(ang),
                    rng.uniform(0.0, 12.0, n_far)], 1)
    return np.concatenate([ground, posts, far])


# ---------------------------------------------------------------------------
# trajectory generation


def _make_path_table(kind: str, params: dict):
    if kind == "room":
        return _ellipse_table(params.get("path_a", 2.2), params.get("path_b", 1.5))
    if kind == "corridor-loop":
        return _rounded_rect_table(params.get("half_x", 5.0),
                                   params.get("half_y", 3.0),
                                   params.get("corner_radius", 1.2))
    if kind == "outdoor-sparse":
        return _circle_table(params.get("path_radius", 8.0))
    raise ValueError(f"unknown scenario kind {kind!r}")


def generate_trajectory(kind: str, params: dict, n_ticks: int):
    """Ground-truth root/camera channels; starts at rest (held for ~0.35 s)."""
    table, closed = _make_path_table(kind, params)
    seg = np.diff(np.vstack([table, table[:1]]), axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total_len = cum[-1]

    speed = params.get("speed", 1.0)
    hold, ramp = params.get("hold_s", 0.35), params.get("ramp_s", 1.2)
    t = np.arange(n_ticks) * DT
    v = speed * _smoothstep((t - hold) / ramp)
    s = np.concatenate([[0.0], np.cumsum(v[:-1] * DT)])
    if closed:
        s = np.mod(s, total_len)
    else:
        s = np.clip(s, 0.0, total_len - 1e-9)

    # Interpolate positions and tangents along the table.
    xs = np.interp(s, cum, np.concatenate([table[:, 0], table[:1, 0]]))
    ys = np.interp(s, cum, np.concatenate([table[:, 1], table[:1, 1]]))
    tang_tab = seg / seg_len[:, None]
    tx = np.interp(s, cum, np.concatenate([tang_tab[:, 0], tang_tab[:1, 0]]))
    ty = np.interp(s, cum, np.concatenate([tang_tab[:, 1], tang_tab[:1, 1]]))
    heading = np.stack([tx, ty], 1)
    heading /= np.linalg.norm(heading, axis=1, keepdims=True)

    bob_amp = params.get("bob_amp", 0.015)
    bob = bob_amp * np.sin(2 * np.pi * params.get("bob_hz", 1.8) * t) \
        * _smoothstep((t - hold) / ramp)
    root = np.stack([xs, ys, bob], 1)

    pitch = math.radians(params.get("camera_pitch_deg", 12.0))
    fwd = np.stack([np.cos(pitch) * heading[:, 0],
                    np.cos(pitch) * heading[:, 1],
                    np.full(n_ticks, -np.sin(pitch))], 1)
    zup = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, zup)
    right /= np.linalg.norm(right, axis=1, keepdims=True)
    down = np.cross(fwd, right)
    cam_R = np.stack([right, down, fwd], axis=2)  # columns [r, d, f]

    offset = np.asarray(params.get("offset_body", [0.08, 0.0, 0.65]), dtype=float)
    left = np.stack([-heading[:, 1], heading[:, 0]], 1)
    off_world = (offset[0] * np.column_stack([heading, np.zeros(n_ticks)])
                 + offset[1] * np.column_stack([left, np.zeros(n_ticks)])
                 + offset[2] * zup)
    cam_t = root + off_world

    # Shift the world so the initial root position is the origin.
    shift = root[0].copy()
    root = root - shift
    cam_t = cam_t - shift

    # Discrete kinematics: Euler integration of these reproduces root exactly.
    vel = np.zeros_like(root)
    vel[:-1] = np.diff(root, axis=0) / DT
    vel[-1] = vel[-2]
    acc = np.zeros_like(root)
    acc[:-1] = np.diff(vel, axis=0) / DT
    acc[-1] = acc[-2]
    return root, vel, acc, cam_R, cam_t, cam_t - root, shift


# ---------------------------------------------------------------------------
# scenario assembly


def build_scenario(spec: dict) -> Scenario:
    """Realize a scenario from its declarative spec dict."""
    kind = spec.get("kind", "room")
    seed = int(spec.get("seed", 0))
    duration = float(spec.get("duration_s", 30.0))
    if duration <= 0:
        raise ValueError("duration_s must be positive")
    n_ticks = int(round(duration * TICK_RATE)) + 1

    cam = spec.get("camera", {})
    intr = CameraIntrinsics(fx=float(cam.get("fx", 460.0)),
                            fy=float(cam.get("fy", 460.0)),
                            cx=float(cam.get("cx", 320.0)),
                            cy=float(cam.get("cy", 240.0)),
                            width=int(cam.get("width", 640)),
                            height=int(cam.get("height", 480)))

    params = dict(spec.get("scene", {}))
    params.update(spec.get("trajectory", {}))
    if "offset_body" in cam:
        params["offset_body"] = cam["offset_body"]

    points, occluders = generate_scene(kind, params, seed)
    root, vel, acc, cam_R, cam_t, r2c, shift = generate_trajectory(
        kind, params, n_ticks)
    points = points - shift

    noise = spec.get("noise", {})
    mocap = spec.get("mocap", {})
    return Scenario(
        name=str(spec.get("name", kind)),
        kind=kind,
        seed=seed,
        intrinsics=intr,
        scene_points=points,
        occluders=occluders,
        times=np.arange(n_ticks) * DT,
        cam_R=cam_R,
        cam_t=cam_t,
        root_pos=root,
        root_vel=vel,
        root_accel=acc,
        root_to_cam=r2c,
        pixel_sigma=float(noise.get("pixel_sigma", 0.0)),
        outlier_rate=float(noise.get("outlier_rate", 0.0)),
        match_dropout=float(noise.get("match_dropout", 0.0)),
        drift_translation_sigma=float(mocap.get("drift_translation_sigma", 0.0)),
        drift_rotation_sigma=float(mocap.get("drift_rotation_sigma", 0.0)),
        accel_sigma=float(mocap.get("accel_sigma", 0.0)),
        occlusion_windows=[tuple(map(float, w))
                           for w in spec.get("occlusion_windows", [])],
        max_matches=int(cam.get("max_matches", 160)),
        spec=dict(spec),
    )


def load_scenario(path: str) -> Scenario:
    with open(path, "r") as fh:
        spec = yaml.safe_load(fh)
    if not isinstance(spec, dict):
        raise ValueError(f"scenario file {path} did not parse to a mapping")
    return build_scenario(spec)


def save_scenario_spec(spec: dict, path: str):
    with open(path, "w") as fh:
        yaml.safe_dump(spec, fh, sort_keys=False)


# ---------------------------------------------------------------------------
# observation


def _segments_block(cam_xy, pts_xy, segments):
    """True where the cam->point sight line crosses an occluder segment."""
    blocked = np.zeros(len(pts_xy), dtype=bool)
    d = pts_xy - cam_xy  # (N,2)
    for (a, b) in segments:
        e = b - a  # segment direction
        denom = d[:, 0] * (-e[1]) - d[:, 1] * (-e[0])
        rel = a - cam_xy
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = (rel[0] * (-e[1]) - rel[1] * (-e[0])) / denom
            uu = (d[:, 0] * rel[1] - d[:, 1] * rel[0]) / denom
        hit = (np.abs(denom) > 1e-12) & (tt > 1e-6) & (tt < 1.0 - 1e-4) \
            & (uu > 1e-6) & (uu < 1.0 - 1e-6)
        blocked |= hit
    return blocked


def observe(scn: Scenario, tick: int) -> MatchSet:
    """Simulated feature matches for the camera frame at the given tick."""
    ms, _ = observe_with_truth(scn, tick)
    return ms


def observe_with_truth(scn: Scenario, tick: int):
    """MatchSet plus the ground-truth outlier mask (tests only)."""
    ts = float(scn.times[tick])
    empty = MatchSet(tick, ts, np.zeros(0, dtype=int), np.zeros((0, 2)),
                     np.zeros(0, dtype=int))
    if scn.is_occluded(tick):
        return empty, np.zeros(0, dtype=bool)

    pose = scn.camera_pose(tick)
    pts = scn.scene_points
    y = pose.inverse_transform(pts)
    z = y[:, 2]
    visible = (z > Z_NEAR) & (z < MAX_RANGE)
    px = np.zeros((len(pts), 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = scn.intrinsics.project(y)
    px[visible] = proj[visible]
    visible &= scn.intrinsics.in_image(px, margin=PIX_MARGIN)
    if scn.occluders is not None and visible.any():
        blocked = _segments_block(pose.t[:2], pts[:, :2], scn.occluders)
        visible &= ~blocked

    n = len(pts)
    drop = rng_for(scn.seed, tick, _S_DROPOUT).random(n) < scn.match_dropout
    visible &= ~drop
    ids = np.nonzero(visible)[0]
    if len(ids) > scn.max_matches:
        stride_idx = np.linspace(0, len(ids) - 1, scn.max_matches).astype(int)
        ids = ids[stride_idx]
    if len(ids) == 0:
        return empty, np.zeros(0, dtype=bool)

    depth = z[ids]
    levels = np.clip((np.log(np.maximum(depth, 1e-3) / LEVEL_BASE_DEPTH)
                      / np.log(LEVEL_RATIO)).astype(int), 0, N_LEVELS - 1)

    gen_out = rng_for(scn.seed, tick, _S_OUTLIER)
    out_mask = gen_out.random(n)[ids] < scn.outlier_rate
    noise = rng_for(scn.seed, tick, _S_PIXNOISE).normal(size=(n, 2))[ids]
    pix = px[ids] + noise * scn.pixel_sigma * (1.2 ** levels)[:, None]
    if out_mask.any():
        u = gen_out.random((n, 2))[ids]
        w, h = scn.intrinsics.width, scn.intrinsics.height
        pix[out_mask] = u[out_mask] * np.array([w - 1.0, h - 1.0])
    return MatchSet(tick, ts, ids, pix, levels), out_mask


# ---------------------------------------------------------------------------
# mocap stream


def mocap_stream(scn: Scenario) -> list:
    """All 60 Hz mocap frames with the scenario's drift and noise model.

    The translation random walk is shared by the camera and root channels:
    mocap drifts globally while staying locally/bodily consistent, so
    root_to_cam stays exact.
    """
    T = scn.n_ticks
    sig_t = scn.drift_translation_sigma
    sig_r = scn.drift_rotation_sigma
    sig_a = scn.accel_sigma

    steps = np.zeros((T, 3))
    rots = np.zeros((T, 3))
    acc_noise = np.zeros((T, 3))
    for k in range(T):
        if sig_t > 0:
            steps[k] = rng_for(scn.seed, k, _S_DRIFT_T).normal(size=3) \
                * (sig_t * np.sqrt(DT))
        if sig_r > 0:
            eta = rng_for(scn.seed, k, _S_DRIFT_R).normal(size=3) * sig_r
            norm = np.linalg.norm(eta)
            cap = 5.0 * sig_r
            if norm > cap:
                eta *= cap / norm
            rots[k] = eta
        if sig_a > 0:
            acc_noise[k] = rng_for(scn.seed, k, _S_ACCEL).normal(size=3) * sig_a
    # Walk anchored at the calibrated origin: zero drift at the first tick.
    walk = np.vstack([np.zeros(3), np.cumsum(steps[1:], axis=0)])

    frames = []
    for k in range(T):
        R = scn.cam_R[k] @ exp_so3(rots[k]) if sig_r > 0 else scn.cam_R[k]
        frames.append(MocapFrame(
            index=k,
            timestamp=float(scn.times[k]),
            cam_pose=RigidPose(R, scn.cam_t[k] + walk[k]),
            root_pos=scn.root_pos[k] + walk[k],
            root_accel=scn.root_accel[k] + acc_noise[k],
            root_to_cam=scn.root_to_cam[k].copy(),
        ))
    return frames


# ---------------------------------------------------------------------------
# IMU synthesis


def synth_imu(rotations, accel_world, gravity, dt):
    """Body-frame gyro and accelerometer readings from a world trajectory.

    rotations: (T,3,3) body-to-world. accel_world: (T,3) linear acceleration
    in world. Returns (omega (T-1,3), accel_body (T-1,3)).
    """
    rotations = np.asarray(rotations, dtype=float)
    accel_world = np.asarray(accel_world, dtype=float)
    if rotations.ndim != 3 or len(rotations) < 2:
        raise TooShort("need at least two rotation samples")
    if len(accel_world) < len(rotations) - 1:
        raise TooShort("need acceleration for every gyro interval")
    g = np.asarray(gravity, dtype=float)
    T = len(rotations)
    omega = np.zeros((T - 1, 3))
    accel_body = np.zeros((T - 1, 3))
    for t in range(T - 1):
        omega[t] = log_so3(rotations[t].T @ rotations[t + 1]) / dt
        accel_body[t] = rotations[t].T @ (accel_world[t] - g)
    return omega, accel_body
