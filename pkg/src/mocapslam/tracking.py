"""Front end: pose alignment, prior-constrained tracking, keyframes, recovery."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import CameraIntrinsics
from .liegroup import RigidPose, jr_inv, log_so3, slerp
from .mapping import HUBER_DELTA2, LEVEL_SCALE, MappingBackend, SlamMap
from .optimizer import FactorGraph, solve_lm

MIN_INLIERS = 15
RELOC_MIN_INLIERS = 30
ALIGN_BLEND = 0.1
TRACK_ROUNDS = 3
BOOT_BASELINE = 0.12  # meters of travel before the second keyframe


def tracking_weights(focal: float, scale: float) -> dict:
    """Pose-prior coefficients; units come out in pixels."""
    return {"lambda_R": 0.01 * focal ** 2,
            "lambda_t": 0.5 * focal ** 2 * scale ** 2}


@dataclass
class TrackingConfig:
    min_inliers: int = MIN_INLIERS
    reloc_min_inliers: int = RELOC_MIN_INLIERS
    kf_min_gap: int = 5
    kf_max_gap: int = 30
    kf_min_inliers: int = 20
    kf_overlap_max: float = 0.9
    reloc_radius: float = 2.0
    reloc_attempts: int = 5
    pixel_sigma: float = 1.0
    huber_delta2: float = HUBER_DELTA2
    # id matches come from descriptors, which search globally; a finite
    # gate here restricts association to a window around the prior pose
    match_gate_px: float = float("inf")
    rounds: int = TRACK_ROUNDS
    blend: float = ALIGN_BLEND
    local_recent: int = 3
    boot_baseline: float = BOOT_BASELINE


@dataclass
class TrackState:
    last_frame_pose: RigidPose
    last_frame_mocap: RigidPose
    last_kf_id: Optional[int] = None
    relocalized_recently: bool = False
    frames_since_keyframe: int = 0


@dataclass
class TrackResult:
    pose: RigidPose
    n: int
    tracked: bool
    inlier_mask: np.ndarray


@dataclass
class FrameOutcome:
    frame: int
    timestamp: float
    result: TrackResult
    aligned: RigidPose
    anchor: str
    relocalized: bool = False
    new_keyframe: Optional[int] = None


def align_camera_pose(state: TrackState, map_: Optional[SlamMap],
                      mocap_pose: RigidPose,
                      blend: float = ALIGN_BLEND) -> RigidPose:
    """Chain the relative mocap motion onto the anchor's refined pose.

    The anchor is the last keyframe (re-read from the map, since bundle
    adjustment may have moved it) unless a relocalization happened and no
    keyframe exists after it, in which case the last frame anchors. The
    rotation is then pulled toward the raw mocap orientation by `blend`.
    """
    use_frame = state.relocalized_recently or state.last_kf_id is None
    if use_frame or map_ is None:
        anchor_pose = state.last_frame_pose
        anchor_mocap = state.last_frame_mocap
    else:
        with map_.lock:
            kf = map_.keyframes[state.last_kf_id]
            anchor_pose = kf.pose
            anchor_mocap = RigidPose(kf.mocap_R, kf.mocap_t)
    R_bar = anchor_pose.R @ anchor_mocap.R.T @ mocap_pose.R
    R_bar = slerp(R_bar, mocap_pose.R, blend)
    t_bar = anchor_pose.t - anchor_mocap.t + mocap_pose.t
    return RigidPose(R_bar, t_bar)


def build_local_map(map_: SlamMap, state: Optional[TrackState],
                    lost: bool = False, reloc_candidates=(),
                    local_recent: int = 3) -> dict:
    """feature_id -> (point_id, position) over the visible neighborhood.

    Keyframes recent relative to the anchor plus the anchor's covisible
    set; while lost, the relocalization candidates and their covisibles
    are pulled in too. On duplicate features the better-observed point
    wins.
    """
    with map_.lock:
        anchor = state.last_kf_id if state is not None else None
        if anchor in map_.keyframes:
            upto = [k for k in sorted(map_.keyframes) if k <= anchor]
            kf_ids = set(upto[-local_recent:]) if local_recent > 0 else set()
            kf_ids.add(anchor)
            kf_ids.update(o for o, _ in map_.covisible(anchor))
        elif local_recent > 0:
            kf_ids = set(map_.recent_keyframe_ids(local_recent))
        else:
            kf_ids = set()
        if lost:
            for cand in reloc_candidates:
                if cand in map_.keyframes:
                    kf_ids.add(cand)
                    kf_ids.update(o for o, _ in map_.covisible(cand))
        out: dict = {}
        for kf_id in kf_ids:
            for pid in map_.keyframes[kf_id].observations:
                pt = map_.points[pid]
                cur = out.get(pt.feature_id)
                if cur is None or len(map_.points[cur[0]].observations) < \
                        len(pt.observations):
                    out[pt.feature_id] = (pid, pt.position.copy())
        return out


def _chi2_against(pose, pts, pix, inv_var, intrinsics):
    y = pose.inverse_transform(pts)
    front = y[:, 2] > 1e-6
    chi2 = np.full(len(pts), np.inf)
    if front.any():
        d2 = np.sum((intrinsics.project(y[front]) - pix[front]) ** 2, axis=1)
        chi2[front] = d2 * inv_var[front]
    return chi2


def track_camera(aligned: RigidPose, ids, pixels, levels, local_map: dict,
                 intrinsics: CameraIntrinsics, weights,
                 config: TrackingConfig = TrackingConfig()) -> TrackResult:
    """Refine the aligned pose against the local map with pose priors.

    Runs optimize/classify rounds. Classification is a function of the
    current pose alone, so a match dropped while the estimate was still
    biased is readmitted once a later round explains it. Failure is a
    state: with too few inliers the aligned pose is returned untouched
    with n = 0.
    """
    ids = np.asarray(ids)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    levels = np.asarray(levels)
    mask = np.zeros(len(ids), dtype=bool)
    sel = np.array([i for i, fid in enumerate(ids) if int(fid) in local_map],
                   dtype=int)
    if sel.size == 0:
        return TrackResult(aligned, 0, False, mask)
    pts = np.array([local_map[int(ids[i])][1] for i in sel])
    pix = pixels[sel]
    inv_var = 1.0 / (config.pixel_sigma ** 2
                     * LEVEL_SCALE ** (2 * levels[sel].astype(float)))

    # association gate around the prior pose
    y = aligned.inverse_transform(pts)
    front = y[:, 2] > 1e-6
    err = np.full(len(pts), np.inf)
    if front.any():
        err[front] = np.linalg.norm(intrinsics.project(y[front]) - pix[front],
                                    axis=1)
    gated = front & (err <= config.match_gate_px)
    active = gated.copy()
    if not active.any():
        return TrackResult(aligned, 0, False, mask)

    lam_R = float(weights["lambda_R"])
    lam_t = float(weights["lambda_t"])
    pose = aligned
    for _ in range(config.rounds):
        idx = np.flatnonzero(active)
        g = FactorGraph()
        g.add_pose("cam", pose)
        for i in idx:
            g.add_point(("pt", int(i)), pts[i], fixed=True)
        g.add_reprojection_block("cam", [("pt", int(i)) for i in idx],
                                 pix[idx], intrinsics, inv_var[idx],
                                 huber_delta2=config.huber_delta2, key="proj")
        if lam_R > 0.0:
            def res_rot(p):
                return log_so3(aligned.R.T @ p.R)

            def jac_rot(p):
                J = np.zeros((3, 6))
                J[:, 3:] = jr_inv(log_so3(aligned.R.T @ p.R))
                return [J]

            g.add_factor(("cam",), res_rot, jac_rot, information=lam_R,
                         key="prior_R")
        if lam_t > 0.0:
            def res_tr(p):
                return aligned.t - p.t

            def jac_tr(p):
                J = np.zeros((3, 6))
                J[:, :3] = -p.R
                return [J]

            g.add_factor(("cam",), res_tr, jac_tr, information=lam_t,
                         key="prior_t")
        solve_lm(g, max_iters=10)
        pose = g.pose("cam")
        chi2 = _chi2_against(pose, pts, pix, inv_var, intrinsics)
        active = gated & (chi2 <= config.huber_delta2)
        if not active.any():
            return TrackResult(aligned, 0, False, mask)

    n = int(active.sum())
    if n < config.min_inliers:
        return TrackResult(aligned, 0, False, mask)
    mask[sel[active]] = True
    return TrackResult(pose, n, True, mask)


def keyframe_decision(result: TrackResult, state: TrackState,
                      map_: Optional[SlamMap],
                      config: TrackingConfig = TrackingConfig(),
                      inlier_ids=(), mocap_anchored: bool = False) -> bool:
    """Gap, inlier-count and novelty gates, with a forced maximum gap."""
    if state.frames_since_keyframe >= config.kf_max_gap:
        return True
    if not result.tracked:
        # vision lost: with a live mocap anchor the pose is still sound,
        # so keep feeding the map at the minimum cadence and let wider
        # baselines rebuild coverage; without one the pose is a guess
        # that a keyframe would bake into the map
        return mocap_anchored and \
            state.frames_since_keyframe >= config.kf_min_gap
    if state.frames_since_keyframe < config.kf_min_gap:
        return False
    if result.n < config.kf_min_inliers:
        return False
    overlap = 0.0
    if map_ is not None and state.last_kf_id in map_.keyframes and \
            len(inlier_ids):
        with map_.lock:
            kf = map_.keyframes[state.last_kf_id]
            kf_fids = {map_.points[p].feature_id for p in kf.observations}
        # share of the reference keyframe's coverage still tracked; the
        # denominator must be the reference count, not the current inlier
        # count, or a young map (all inliers from the one keyframe that
        # made it) would pin the ratio at 1 and stall insertion
        if kf_fids:
            overlap = sum(1 for f in inlier_ids if int(f) in kf_fids) \
                / len(kf_fids)
    return overlap <= config.kf_overlap_max


def relocalize(map_: SlamMap, guess: RigidPose, ids, pixels, levels,
               intrinsics: CameraIntrinsics,
               config: TrackingConfig = TrackingConfig()):
    """Recover the pose near spatially plausible keyframes, or None.

    Candidates are keyframes whose position lies within reloc_radius of the
    current aligned position; their points and the points of their covisible
    keyframes form the search map. Each attempt starts from a candidate's
    pose with the pose priors off: being lost means the prior stream is not
    trustworthy here, so the estimate must stand on vision alone.
    """
    with map_.lock:
        cands = sorted(
            (kf_id for kf_id, kf in map_.keyframes.items()
             if np.linalg.norm(kf.pose.t - guess.t) <= config.reloc_radius),
            key=lambda k: np.linalg.norm(map_.keyframes[k].pose.t - guess.t))
    if not cands:
        return None
    local = build_local_map(map_, None, lost=True, reloc_candidates=cands,
                            local_recent=0)
    if not local:
        return None
    vision_only = {"lambda_R": 0.0, "lambda_t": 0.0}
    for cand in cands[:config.reloc_attempts]:
        with map_.lock:
            init = map_.keyframes[cand].pose
        result = track_camera(init, ids, pixels, levels, local, intrinsics,
                              vision_only, config)
        if result.n >= config.reloc_min_inliers:
            return result
    return None


class Tracker:
    """Per-frame orchestration: align, track, recover, spawn keyframes.

    mocap poses drive alignment and priors; passing mocap_pose=None switches
    to a constant-velocity prediction with zero prior weights, which needs
    initial_pose to bootstrap.
    """

    def __init__(self, map_: SlamMap, intrinsics: CameraIntrinsics, weights,
                 backend: Optional[MappingBackend] = None,
                 config: TrackingConfig = TrackingConfig(),
                 initial_pose: Optional[RigidPose] = None):
        self.map = map_
        self.intrinsics = intrinsics
        self.weights = dict(weights)
        self.backend = backend
        self.config = config
        self.initial_pose = initial_pose
        self.state: Optional[TrackState] = None
        self.lost = False
        self._boot_kf0_t = None
        self._last_motion = RigidPose.identity()

    # -- helpers -------------------------------------------------------------

    def _align(self, mocap_pose: Optional[RigidPose]) -> tuple:
        if mocap_pose is not None:
            kind = "frame" if (self.state.relocalized_recently
                               or self.state.last_kf_id is None) else "keyframe"
            return align_camera_pose(self.state, self.map, mocap_pose,
                                     self.config.blend), kind
        # constant velocity when no pose prior stream exists
        prev = self.state.last_frame_pose
        return prev.compose(self._last_motion), "velocity"

    def _spawn_keyframe(self, pose, mocap_pose, frame, timestamp, ids,
                        pixels, levels, result, local_map) -> int:
        obs = {}
        if result.tracked:
            for i in np.flatnonzero(result.inlier_mask):
                fid = int(ids[i])
                if fid in local_map:
                    obs[local_map[fid][0]] = (pixels[i], int(levels[i]))
        stored = mocap_pose if mocap_pose is not None else pose
        with self.map.lock:
            kf = self.map.add_keyframe(pose, stored.R, stored.t, frame,
                                       timestamp, observations=obs)
        if self.backend is not None:
            self.backend.submit(kf.kf_id, ids, pixels, levels)
        self.state.last_kf_id = kf.kf_id
        self.state.frames_since_keyframe = 0
        self.state.relocalized_recently = False
        return kf.kf_id

    # -- main entry ------------------------------------------------------------

    def process_frame(self, frame, timestamp, mocap_pose: Optional[RigidPose],
                      ids, pixels, levels) -> FrameOutcome:
        ids = np.asarray(ids)
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        levels = np.asarray(levels)
        cfg = self.config

        if self.state is None:
            start = mocap_pose if mocap_pose is not None else self.initial_pose
            if start is None:
                raise ValueError("first frame needs a mocap pose or "
                                 "initial_pose")
            self.state = TrackState(start, mocap_pose or start)
            out = FrameOutcome(frame, timestamp,
                               TrackResult(start, 0, False,
                                           np.zeros(len(ids), dtype=bool)),
                               start, "boot")
            out.new_keyframe = self._spawn_keyframe(
                start, mocap_pose, frame, timestamp, ids, pixels, levels,
                out.result, {})
            self._boot_kf0_t = start.t.copy()
            return out

        self.state.frames_since_keyframe += 1
        aligned, anchor_kind = self._align(mocap_pose)
        local = build_local_map(self.map, self.state, lost=self.lost,
                                reloc_candidates=self._reloc_candidates(
                                    aligned) if self.lost else (),
                                local_recent=cfg.local_recent)
        result = track_camera(aligned, ids, pixels, levels, local,
                              self.intrinsics, self.weights, cfg)
        relocalized = False
        if not result.tracked:
            self.lost = True
            rec = relocalize(self.map, aligned, ids, pixels, levels,
                             self.intrinsics, cfg)
            if rec is not None:
                result = rec
                relocalized = True
                self.state.relocalized_recently = True
                self.lost = False
        else:
            self.lost = False

        outcome = FrameOutcome(frame, timestamp, result, aligned,
                               anchor_kind, relocalized)

        make_kf = False
        if self._boot_kf0_t is not None and len(self.map.points) == 0:
            # bootstrapping: wait for baseline, then force the second keyframe
            if np.linalg.norm(result.pose.t - self._boot_kf0_t) >= \
                    cfg.boot_baseline:
                make_kf = True
        else:
            self._boot_kf0_t = None
            inlier_fids = ids[result.inlier_mask] if result.tracked else ()
            make_kf = keyframe_decision(result, self.state, self.map, cfg,
                                        inlier_fids,
                                        mocap_anchored=mocap_pose is not None)
        if make_kf:
            outcome.new_keyframe = self._spawn_keyframe(
                result.pose, mocap_pose, frame, timestamp, ids, pixels,
                levels, result, local)

        # keep the frame-to-frame motion fresh so a mocap dropout on the
        # very next frame has a live velocity model to fall back on; a
        # relocalization jump is a teleport, not motion, so the model
        # resets to rest there instead of keeping the stale pre-failure
        # motion (which would poison every later prediction)
        if relocalized:
            self._last_motion = RigidPose.identity()
        else:
            prev = self.state.last_frame_pose
            # the motion feeds next frame's prediction, whose refinement
            # feeds the motion again: any rotation-matrix shear would
            # compound geometrically around that loop, so project it out
            self._last_motion = prev.inverse().compose(
                result.pose).orthonormalized()
        self.state.last_frame_pose = result.pose
        self.state.last_frame_mocap = mocap_pose or result.pose
        return outcome

    def _reloc_candidates(self, guess: RigidPose):
        with self.map.lock:
            return [kf_id for kf_id, kf in self.map.keyframes.items()
                    if np.linalg.norm(kf.pose.t - guess.t)
                    <= self.config.reloc_radius]
