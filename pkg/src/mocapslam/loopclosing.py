"""Loop closure: re-observation detection, pose-graph solve, map correction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import CameraIntrinsics
from .liegroup import RigidPose, log_se3
from .mapping import SlamMap, cull_and_fuse
from .optimizer import FactorGraph, solve_lm
from .tracking import TrackingConfig, track_camera

GAP_MIN_KFS = 50
GAP_MIN_PATH = 10.0     # meters walked between the keyframes
OVERLAP_MIN = 20        # shared features before a candidate is considered
OMEGA_POSE = 0.2

# Pure-vision alignment: a pose prior toward the drifted estimate would
# fight the very correction the loop is supposed to measure.
_ALIGN_WEIGHTS = {"lambda_R": 0.0, "lambda_t": 0.0}


class DisconnectedGraph(RuntimeError):
    """Essential graph does not reach every keyframe."""


@dataclass(frozen=True)
class LoopCandidate:
    current_kf: int
    matched_kf: int
    # relative pose matched -> current, measured against the old region
    T_loop: RigidPose
    shared: int


def _kf_feature_pixels(map_: SlamMap, kf_id):
    """(feature_id, pixel, level) rows for one keyframe's observations."""
    kf = map_.keyframes[kf_id]
    rows = []
    for pid in sorted(kf.observations):
        pixel, level = kf.observations[pid]
        rows.append((map_.points[pid].feature_id, pixel, level))
    return rows


def _region_map(map_: SlamMap, center_kf) -> dict:
    """feature_id -> (point_id, position) around one keyframe.

    Same duplicate rule as the tracking local map: the better-observed
    point wins.
    """
    kf_ids = {center_kf}
    kf_ids.update(o for o, _ in map_.covisible(center_kf))
    out: dict = {}
    for kf_id in kf_ids:
        for pid in map_.keyframes[kf_id].observations:
            pt = map_.points[pid]
            cur = out.get(pt.feature_id)
            if cur is None or len(map_.points[cur[0]].observations) < \
                    len(pt.observations):
                out[pt.feature_id] = (pid, pt.position.copy())
    return out


def detect_loop(map_: SlamMap, current_kf, intrinsics: CameraIntrinsics,
                *, pixel_sigma: float = 1.0, gap_min_kfs: int = GAP_MIN_KFS,
                gap_min_path: float = GAP_MIN_PATH,
                overlap_min: int = OVERLAP_MIN) -> Optional[LoopCandidate]:
    """Old keyframe re-observing the current view, if one exists.

    A candidate must be far from the current keyframe along the trajectory
    (by count or by path length), not a spanning-tree neighbor and not
    covisible, and must share enough features. The match is then verified
    by tracking the current keyframe's pixels against the old region's
    points; the refined pose gives the loop transform.
    """
    with map_.lock:
        if current_kf not in map_.keyframes:
            raise KeyError(f"keyframe {current_kf} not in map")
        rows = _kf_feature_pixels(map_, current_kf)
        if len(rows) < overlap_min:
            return None
        cur_fids = {fid for fid, _, _ in rows}
        order = sorted(map_.keyframes)
        pos = np.array([map_.keyframes[k].pose.t for k in order])
        path = np.concatenate([[0.0], np.cumsum(
            np.linalg.norm(np.diff(pos, axis=0), axis=1))])
        at = {k: i for i, k in enumerate(order)}
        ci = at[current_kf]
        # spanning-tree neighbors are never loop material; covisible
        # keyframes stay eligible, since a strong association bridge is
        # exactly what a verified revisit looks like
        excluded = {current_kf, map_.spanning_parent.get(current_kf)}
        excluded.update(k for k, p in map_.spanning_parent.items()
                        if p == current_kf)

        best, best_shared = None, 0
        for old in order:
            oi = at[old]
            far = ci - oi >= gap_min_kfs or path[ci] - path[oi] >= gap_min_path
            if old in excluded or oi >= ci or not far:
                continue
            old_fids = {map_.points[pid].feature_id
                        for pid in map_.keyframes[old].observations}
            shared = len(cur_fids & old_fids)
            if shared > best_shared:
                best, best_shared = old, shared
        if best is None or best_shared < overlap_min:
            return None

        region = _region_map(map_, best)
        ids = np.array([fid for fid, _, _ in rows])
        pixels = np.array([px for _, px, _ in rows])
        levels = np.array([lv for _, _, lv in rows])
        start = map_.keyframes[current_kf].pose
        matched_pose = map_.keyframes[best].pose

    cfg = TrackingConfig(min_inliers=overlap_min, pixel_sigma=pixel_sigma)
    result = track_camera(start, ids, pixels, levels, region, intrinsics,
                          _ALIGN_WEIGHTS, cfg)
    if not result.tracked:
        return None
    T_loop = matched_pose.inverse().compose(result.pose).orthonormalized()
    return LoopCandidate(current_kf, best, T_loop, result.n)


def _edge_residual(T_ij: RigidPose):
    def res(Ti, Tj):
        return log_se3(T_ij.compose(Tj.inverse()).compose(Ti))
    return res


def optimize_pose_graph(map_: SlamMap, candidate: LoopCandidate,
                        omega_pose: float = OMEGA_POSE, *,
                        min_covis: int = 100, max_iters: int = 100) -> dict:
    """Distribute the loop error over the essential graph.

    Every relative transform except the loop edge is frozen at the current
    estimate, so the graph term only resists change in relative pose. The
    mocap term pulls each consecutive keyframe pair toward the relative
    transform the mocap stream reported. The first keyframe anchors the
    gauge. Returns keyframe id -> optimized pose without touching the map.
    """
    with map_.lock:
        order = sorted(map_.keyframes)
        poses = {k: map_.keyframes[k].pose for k in order}
        mocap = {k: RigidPose(map_.keyframes[k].mocap_R,
                              map_.keyframes[k].mocap_t) for k in order}
        edges = map_.essential_edges(min_covis)

    loop_pair = frozenset((candidate.matched_kf, candidate.current_kf))
    edges = {e for e in edges if len(e) == 2 and e != loop_pair}

    reach = {order[0]}
    frontier = [order[0]]
    adj: dict = {k: [] for k in order}
    for e in edges | {loop_pair}:
        a, b = sorted(e)
        adj[a].append(b)
        adj[b].append(a)
    while frontier:
        k = frontier.pop()
        for o in adj[k]:
            if o not in reach:
                reach.add(o)
                frontier.append(o)
    if len(reach) != len(order):
        raise DisconnectedGraph(
            f"{len(order) - len(reach)} keyframes unreachable from {order[0]}")

    g = FactorGraph()
    for k in order:
        g.add_pose(k, poses[k], fixed=k == order[0])
    for e in edges:
        i, j = sorted(e)
        T_ij = poses[i].inverse().compose(poses[j])
        g.add_factor((i, j), _edge_residual(T_ij), key=f"edge:{i}:{j}")
    g.add_factor((candidate.matched_kf, candidate.current_kf),
                 _edge_residual(candidate.T_loop), key="loop")
    if omega_pose > 0.0:
        for prev, j in zip(order, order[1:]):
            M = mocap[prev].inverse().compose(mocap[j])
            g.add_factor((prev, j), _edge_residual(M),
                         information=omega_pose, key=f"mocap:{prev}:{j}")

    solve_lm(g, max_iters=max_iters, cost_tol=1e-14, grad_tol=1e-12)
    return {k: g.pose(k).orthonormalized() for k in order}


def correct_loop(map_: SlamMap, new_poses: dict,
                 intrinsics: CameraIntrinsics, *,
                 pixel_sigma: float = 1.0) -> SlamMap:
    """Install optimized keyframe poses and co-transform the map points.

    Each point moves rigidly with its reference keyframe, which keeps its
    reprojection there bit-identical; duplicate points the loop created
    are then fused. Runs under the writer lock end to end so tracking sees
    the correction as one atomic teleport at its next map read.
    """
    with map_.lock:
        deltas = {}
        for kf_id, new in new_poses.items():
            old = map_.keyframes[kf_id].pose
            deltas[kf_id] = new.compose(old.inverse())
        for pt in map_.points.values():
            d = deltas.get(pt.reference_kf())
            if d is not None:
                pt.position = d.transform(pt.position)
        for kf_id, new in new_poses.items():
            map_.keyframes[kf_id].pose = new
        map_.version += 1
        if map_.keyframes:
            cull_and_fuse(map_, max(map_.keyframes), intrinsics,
                          pixel_sigma=pixel_sigma)
    return map_


class LoopCloser:
    """Detection plus correction, run inside the mapping worker.

    Keeps a log of closure events (consumed by the run log) and the last
    correction applied to the newest keyframe, which downstream fusion can
    treat as a teleport rather than motion.
    """

    def __init__(self, map_: SlamMap, intrinsics: CameraIntrinsics, *,
                 omega_pose: float = OMEGA_POSE, pixel_sigma: float = 1.0,
                 gap_min_kfs: int = GAP_MIN_KFS,
                 gap_min_path: float = GAP_MIN_PATH,
                 overlap_min: int = OVERLAP_MIN,
                 min_residual: float = 0.05):
        self.map = map_
        self.intrinsics = intrinsics
        self.omega_pose = omega_pose
        self.pixel_sigma = pixel_sigma
        self.gap_min_kfs = gap_min_kfs
        self.gap_min_path = gap_min_path
        self.overlap_min = overlap_min
        self.min_residual = min_residual
        self.events: list = []
        self.last_correction: Optional[RigidPose] = None

    def close(self, current_kf) -> Optional[dict]:
        cand = detect_loop(self.map, current_kf, self.intrinsics,
                           pixel_sigma=self.pixel_sigma,
                           gap_min_kfs=self.gap_min_kfs,
                           gap_min_path=self.gap_min_path,
                           overlap_min=self.overlap_min)
        if cand is None:
            return None
        with self.map.lock:
            T_c = self.map.keyframes[cand.current_kf].pose
            T_m = self.map.keyframes[cand.matched_kf].pose
            frame = self.map.keyframes[cand.current_kf].frame
        pre = float(np.linalg.norm(log_se3(
            cand.T_loop.compose(T_c.inverse()).compose(T_m))))
        # a revisit the front end already reconciled measures a tiny
        # residual: correcting it would only churn the map
        if pre < self.min_residual:
            return None
        self.map.add_loop_edge(cand.matched_kf, cand.current_kf)
        new_poses = optimize_pose_graph(self.map, cand, self.omega_pose)
        post = float(np.linalg.norm(log_se3(cand.T_loop.compose(
            new_poses[cand.current_kf].inverse())
            .compose(new_poses[cand.matched_kf]))))
        self.last_correction = new_poses[cand.current_kf].compose(
            T_c.inverse())
        correct_loop(self.map, new_poses, self.intrinsics,
                     pixel_sigma=self.pixel_sigma)
        event = {"event": "loop", "frame": int(frame),
                 "current_kf": int(cand.current_kf),
                 "matched_kf": int(cand.matched_kf),
                 "shared": int(cand.shared),
                 "pre_residual": pre, "post_residual": post}
        self.events.append(event)
        return event
