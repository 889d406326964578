"""Map back end: triangulation, point confidence, windowed mocap-aware BA."""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .camera import CameraIntrinsics
from .liegroup import RigidPose, SimTransform, jr_inv, log_so3
from .optimizer import FactorGraph, SingularSystem, SolveReport, solve_lm

CONFIDENCE_SCALE = 50.0
CONFIDENCE_FLOOR = 0.1     # fresh or single-observer points keep some weight
BA_WINDOW = 5
HUBER_DELTA2 = 5.991       # 95% chi-square, 2 dof
LEVEL_SCALE = 1.2          # per-level measurement sigma growth
MERGE_RADIUS = 0.01        # meters, cross-feature duplicate merge
MERGE_RADIUS_SAME_FEATURE = 0.10
CULL_GRACE_KFS = 3
CULL_CHI2 = 24.0           # observation scrub gate, well outside HUBER_DELTA2
PROJ_GATE_PX = 60.0        # association gate for re-observing a map point
MIN_PARALLAX = 1e-6        # radians; geometric floor, any real pair passes
TRI_PARALLAX_SIN = 0.02    # backend acceptance, about 1.1 degrees: rays more
                           # parallel than this put the depth at the mercy of
                           # sub-millimetre pose error, so the feature waits in
                           # the candidate stash until the baseline widens
MAX_REPROJ_PX = 2.0        # two-view triangulation acceptance
MIN_DEPTH = 1e-6
CANDIDATE_STASH = 6        # pixel observations kept per untriangulated feature
CANDIDATE_MAX_AGE = 8      # keyframes before an untriangulated feature is dropped


class DegenerateGeometry(ValueError):
    """Triangulation geometry does not determine a point."""


class SingleObserver(ValueError):
    """Confidence needs at least two observing keyframes."""


@dataclass
class Keyframe:
    kf_id: int
    frame: int
    timestamp: float
    pose: RigidPose
    mocap_R: np.ndarray
    mocap_t: np.ndarray
    # point_id -> (pixel (2,), level)
    observations: dict = field(default_factory=dict)


@dataclass
class MapPoint:
    point_id: int
    feature_id: int
    position: np.ndarray
    # kf_id -> (pixel (2,), level)
    observations: dict = field(default_factory=dict)
    confidence: float = CONFIDENCE_FLOOR
    created_kf: int = 0

    def reference_kf(self) -> int:
        return min(self.observations)


class SlamMap:
    """Keyframes, points, and the covisibility bookkeeping between them.

    All mutation goes through the methods below under `lock`, so a reader
    holding the lock always sees a consistent snapshot. `version` bumps on
    every batch of changes.
    """

    def __init__(self):
        self.keyframes: dict[int, Keyframe] = {}
        self.points: dict[int, MapPoint] = {}
        self.by_feature: dict[int, list[int]] = {}
        self.spanning_parent: dict[int, Optional[int]] = {}
        self.loop_edges: set = set()
        self.lock = threading.RLock()
        self.version = 0
        self._covis: dict[int, dict[int, int]] = {}
        self._next_kf_id = 0
        self._next_point_id = 0

    # -- keyframes ----------------------------------------------------------

    def add_keyframe(self, pose: RigidPose, mocap_R, mocap_t, frame,
                     timestamp, observations=None) -> Keyframe:
        with self.lock:
            kf_id = self._next_kf_id
            self._next_kf_id += 1
            kf = Keyframe(kf_id, int(frame), float(timestamp), pose,
                          np.array(mocap_R, dtype=float),
                          np.array(mocap_t, dtype=float))
            self.keyframes[kf_id] = kf
            self._covis[kf_id] = {}
            for pt_id, (pixel, level) in (observations or {}).items():
                self.add_observation(kf_id, pt_id, pixel, level)
            # Parent: strongest covisibility at creation, else the previous
            # keyframe, so the tree stays connected.
            best, best_n = None, 0
            for other, n in self._covis[kf_id].items():
                if n > best_n or (n == best_n and best is not None
                                  and other > best):
                    best, best_n = other, n
            if best is None and kf_id > 0:
                best = kf_id - 1
            self.spanning_parent[kf_id] = best
            self.version += 1
            return kf

    def recent_keyframe_ids(self, k: int) -> list:
        with self.lock:
            return sorted(self.keyframes)[-k:]

    # -- points ---------------------------------------------------------------

    def add_point(self, feature_id, position, created_kf) -> MapPoint:
        with self.lock:
            pid = self._next_point_id
            self._next_point_id += 1
            pt = MapPoint(pid, int(feature_id),
                          np.array(position, dtype=float),
                          created_kf=int(created_kf))
            self.points[pid] = pt
            self.by_feature.setdefault(int(feature_id), []).append(pid)
            self.version += 1
            return pt

    def add_observation(self, kf_id, point_id, pixel, level):
        with self.lock:
            kf = self.keyframes[kf_id]
            pt = self.points[point_id]
            if point_id in kf.observations:
                return
            for other in pt.observations:
                self._covis[kf_id][other] = self._covis[kf_id].get(other, 0) + 1
                self._covis[other][kf_id] = self._covis[other].get(kf_id, 0) + 1
            obs = (np.asarray(pixel, dtype=float).copy(), int(level))
            kf.observations[point_id] = obs
            pt.observations[kf_id] = obs

    def remove_observation(self, kf_id, point_id):
        with self.lock:
            pt = self.points[point_id]
            if kf_id not in pt.observations:
                return
            del self.keyframes[kf_id].observations[point_id]
            del pt.observations[kf_id]
            for other in pt.observations:
                for a, b in ((kf_id, other), (other, kf_id)):
                    self._covis[a][b] -= 1
                    if self._covis[a][b] == 0:
                        del self._covis[a][b]

    def remove_point(self, point_id):
        with self.lock:
            pt = self.points[point_id]
            for kf_id in list(pt.observations):
                self.remove_observation(kf_id, point_id)
            pids = self.by_feature.get(pt.feature_id)
            if pids is not None:
                pids.remove(point_id)
                if not pids:
                    del self.by_feature[pt.feature_id]
            del self.points[point_id]

    def merge_points(self, keep_id, drop_id):
        """Union drop's observations into keep, then delete drop."""
        with self.lock:
            keep = self.points[keep_id]
            drop = self.points[drop_id]
            moved = [(kf_id, obs) for kf_id, obs in drop.observations.items()
                     if kf_id not in keep.observations]
            self.remove_point(drop_id)
            for kf_id, (pixel, level) in moved:
                self.add_observation(kf_id, keep_id, pixel, level)
            keep.created_kf = min(keep.created_kf, drop.created_kf)
            self.version += 1

    # -- graph structure ------------------------------------------------------

    def covisible(self, kf_id, min_shared: int = 1) -> list:
        """(other_kf_id, shared_count) sorted by descending count."""
        with self.lock:
            row = self._covis.get(kf_id, {})
            out = [(o, n) for o, n in row.items() if n >= min_shared]
            out.sort(key=lambda it: (-it[1], it[0]))
            return out

    def add_loop_edge(self, a, b):
        with self.lock:
            self.loop_edges.add(frozenset((a, b)))
            self.version += 1

    def essential_edges(self, min_covis: int = 100) -> set:
        """Spanning tree + strong covisibility + loop edges, as frozensets."""
        with self.lock:
            edges = set()
            for kf_id, parent in self.spanning_parent.items():
                if parent is not None:
                    edges.add(frozenset((kf_id, parent)))
            for a, row in self._covis.items():
                for b, n in row.items():
                    if n >= min_covis:
                        edges.add(frozenset((a, b)))
            edges |= self.loop_edges
            return edges

    def assert_consistent(self):
        """Bidirectional observations and exact covisibility counts."""
        with self.lock:
            for kf_id, kf in self.keyframes.items():
                for pid in kf.observations:
                    assert kf_id in self.points[pid].observations, \
                        f"kf {kf_id} lists point {pid} one-way"
            counts: dict = {}
            for pt in self.points.values():
                obs = sorted(pt.observations)
                for kf_id in obs:
                    assert kf_id in self.keyframes, f"dead keyframe {kf_id}"
                for i, a in enumerate(obs):
                    assert pt.point_id in self.keyframes[a].observations
                    for b in obs[i + 1:]:
                        counts[(a, b)] = counts.get((a, b), 0) + 1
            for a, row in self._covis.items():
                for b, n in row.items():
                    if a < b:
                        assert counts.get((a, b)) == n, \
                            f"covis {a},{b}: stored {n}, actual {counts.get((a, b))}"
            for pair, n in counts.items():
                assert self._covis[pair[0]].get(pair[1]) == n


# -- triangulation ------------------------------------------------------------

def _rays(pose: RigidPose, pixels: np.ndarray, K: CameraIntrinsics):
    d = np.empty((len(pixels), 3))
    d[:, 0] = (pixels[:, 0] - K.cx) / K.fx
    d[:, 1] = (pixels[:, 1] - K.cy) / K.fy
    d[:, 2] = 1.0
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d @ pose.R.T


def triangulate_rays(pose_a: RigidPose, pose_b: RigidPose, pixels_a,
                     pixels_b, intrinsics: CameraIntrinsics,
                     max_reproj_px=MAX_REPROJ_PX,
                     min_parallax: float = MIN_PARALLAX):
    """Midpoint triangulation of pixel pairs into the world frame.

    Returns (points (k,3), ok (k,)). A pair fails if the rays are parallel
    within min_parallax, the point falls behind either camera, or either
    reprojection misses by more than max_reproj_px (scalar or per-pair).
    """
    pa = np.asarray(pixels_a, dtype=float).reshape(-1, 2)
    pb = np.asarray(pixels_b, dtype=float).reshape(-1, 2)
    if pa.shape != pb.shape:
        raise ValueError(f"pixel shapes differ: {pa.shape} vs {pb.shape}")
    if np.linalg.norm(pose_b.t - pose_a.t) < 1e-9:
        raise DegenerateGeometry("camera centers coincide")
    da = _rays(pose_a, pa, intrinsics)
    db = _rays(pose_b, pb, intrinsics)
    dot = np.einsum("ij,ij->i", da, db)
    denom = 1.0 - dot * dot  # sin^2 of the ray angle
    ok = denom > min_parallax ** 2
    safe = np.where(ok, denom, 1.0)
    r = pose_b.t - pose_a.t
    proj_a = da @ r
    proj_b = db @ r
    s = (proj_a - dot * proj_b) / safe
    u = (dot * proj_a - proj_b) / safe
    X = 0.5 * (pose_a.t + s[:, None] * da + pose_b.t + u[:, None] * db)
    ok &= (s > 0) & (u > 0)
    for pose, pix in ((pose_a, pa), (pose_b, pb)):
        y = pose.inverse_transform(X)
        front = y[:, 2] > MIN_DEPTH
        err = np.full(len(pix), np.inf)
        if front.any():
            err[front] = np.linalg.norm(
                intrinsics.project(y[front]) - pix[front], axis=1)
        ok &= front & (err <= max_reproj_px)
    return X, ok


def triangulate(map_: SlamMap, kf_a_id, kf_b_id, pairs,
                intrinsics: CameraIntrinsics,
                max_reproj_px=MAX_REPROJ_PX) -> list:
    """Create map points from (feature_id, pixel_a, level_a, pixel_b, level_b).

    Observations are attached to both keyframes; rejected pairs are skipped.
    """
    pairs = list(pairs)
    if not pairs:
        return []
    with map_.lock:
        kf_a = map_.keyframes[kf_a_id]
        kf_b = map_.keyframes[kf_b_id]
        pix_a = np.array([p[1] for p in pairs], dtype=float)
        pix_b = np.array([p[3] for p in pairs], dtype=float)
        X, ok = triangulate_rays(kf_a.pose, kf_b.pose, pix_a, pix_b,
                                 intrinsics, max_reproj_px)
        created = []
        for i, (fid, pa, la, pb, lb) in enumerate(pairs):
            if not ok[i]:
                continue
            pt = map_.add_point(fid, X[i], created_kf=kf_b.kf_id)
            map_.add_observation(kf_a_id, pt.point_id, pa, la)
            map_.add_observation(kf_b_id, pt.point_id, pb, lb)
            created.append(pt)
        if created:
            map_.version += 1
        return created


def map_point_confidence(point: MapPoint, keyframes, mocap_to_slam:
                         SimTransform, aggregator: str = "max") -> float:
    """Scaled product of observer baseline and viewing parallax.

    The baseline is measured after mapping keyframe positions back into the
    mocap frame, which keeps the value independent of the map's scale.
    Parallax is the angle between viewing rays, so any frame works.
    """
    if aggregator not in ("max", "mean"):
        raise ValueError(f"unknown aggregator {aggregator!r}")
    obs_kfs = [keyframes[k] for k in point.observations]
    if len(obs_kfs) < 2:
        raise SingleObserver(
            f"point {point.point_id} has {len(obs_kfs)} observer(s)")
    centers = np.array([kf.pose.t for kf in obs_kfs])
    baselines = pdist(mocap_to_slam.inverse().apply(centers))
    rays = point.position - centers
    rays /= np.maximum(np.linalg.norm(rays, axis=1), 1e-12)[:, None]
    cosang = np.clip(rays @ rays.T, -1.0, 1.0)
    iu = np.triu_indices(len(obs_kfs), k=1)
    angles = np.arccos(cosang[iu])
    agg = np.max if aggregator == "max" else np.mean
    return float(CONFIDENCE_SCALE * agg(baselines) * agg(angles))


def recompute_confidences(map_: SlamMap, point_ids, mocap_to_slam,
                          aggregator: str = "max"):
    """Store floor-clamped confidences on the given points."""
    with map_.lock:
        for pid in point_ids:
            pt = map_.points[pid]
            try:
                c = map_point_confidence(pt, map_.keyframes, mocap_to_slam,
                                         aggregator)
            except SingleObserver:
                c = 0.0
            pt.confidence = max(c, CONFIDENCE_FLOOR)


def ba_weights(focal: float, scale: float) -> dict:
    """Pose-prior coefficients that track focal length and map scale."""
    return {"mu_R": 0.01 * focal ** 2, "mu_t": 0.05 * focal ** 2 * scale ** 2}


# -- bundle adjustment ----------------------------------------------------------

def local_bundle_adjust(map_: SlamMap, recent_kf_ids, weights,
                        mocap_to_slam: SimTransform,
                        intrinsics: CameraIntrinsics, *,
                        pixel_sigma: float = 1.0, use_confidence: bool = True,
                        aggregator: str = "max",
                        huber_delta2: float = HUBER_DELTA2,
                        max_iters: int = 10) -> SolveReport:
    """Refine the window keyframes and their points against pose priors.

    Keyframes outside the window that observe the same points join the
    problem fixed. Each window keyframe gets an absolute orientation prior
    (weight mu_R) and a translation-increment prior against its predecessor
    (weight mu_t). Points are marginalized in the solve. The map is written
    back only after the solve succeeds, under the map lock.
    """
    mu_R = float(weights["mu_R"])
    mu_t = float(weights["mu_t"])
    with map_.lock:
        window = sorted(k for k in recent_kf_ids if k in map_.keyframes)
        if not window:
            raise ValueError("no keyframes in the window")
        point_ids = sorted({pid for j in window
                            for pid in map_.keyframes[j].observations})
        recompute_confidences(map_, point_ids, mocap_to_slam, aggregator)
        observers = {j for pid in point_ids
                     for j in map_.points[pid].observations}
        fixed_kfs = sorted(observers - set(window))
        opt = list(window)

        all_ids = sorted(map_.keyframes)
        prev_of = {}
        for j in opt:
            pos = all_ids.index(j)
            prev_of[j] = all_ids[pos - 1] if pos > 0 else None
        if not fixed_kfs:
            # Nothing pins the gauge: anchor on the oldest window keyframe.
            if mu_R == 0.0 or mu_t == 0.0 or prev_of[window[0]] is None:
                fixed_kfs = [window[0]]
                opt = window[1:]
        opt_set = set(opt)
        participants = set(window) | set(fixed_kfs)
        participants |= {prev_of[j] for j in opt if prev_of[j] is not None}

        poses = {j: map_.keyframes[j].pose for j in participants}
        mocap_R = {j: map_.keyframes[j].mocap_R for j in opt}
        mocap_t = {j: map_.keyframes[j].mocap_t for j in participants}
        free_pts = [pid for pid in point_ids
                    if len(map_.points[pid].observations) >= 2]
        fixed_pts = [pid for pid in point_ids
                     if len(map_.points[pid].observations) < 2]
        positions = {pid: map_.points[pid].position.copy()
                     for pid in point_ids}
        conf = {pid: (max(map_.points[pid].confidence, CONFIDENCE_FLOOR)
                      if use_confidence else 1.0) for pid in point_ids}
        obs_by_kf = {}
        pt_set = set(point_ids)
        for j in participants:
            if j in map_.keyframes:
                obs = [(pid, pix, lv) for pid, (pix, lv)
                       in map_.keyframes[j].observations.items()
                       if pid in pt_set]
                if obs:
                    obs_by_kf[j] = obs

    if not opt and not free_pts:
        return SolveReport(0, 0.0, 0.0, [], True, {})

    g = FactorGraph()
    for j in sorted(participants):
        g.add_pose(("kf", j), poses[j], fixed=j not in opt_set)
    for pid in free_pts:
        g.add_point(("pt", pid), positions[pid])
    for pid in fixed_pts:
        g.add_point(("pt", pid), positions[pid], fixed=True)
    var = pixel_sigma ** 2
    for j, obs in obs_by_kf.items():
        pids = [o[0] for o in obs]
        pixels = np.array([o[1] for o in obs])
        w = np.array([conf[pid] / (var * LEVEL_SCALE ** (2 * o[2]))
                      for pid, o in zip(pids, obs)])
        g.add_reprojection_block(("kf", j), [("pt", p) for p in pids],
                                 pixels, intrinsics, w,
                                 huber_delta2=huber_delta2, key=f"proj{j}")
    if mu_R > 0.0:
        for j in opt:
            Rm = mocap_R[j]

            def res_rot(pose, Rm=Rm):
                return log_so3(Rm.T @ pose.R)

            def jac_rot(pose, Rm=Rm):
                J = np.zeros((3, 6))
                J[:, 3:] = jr_inv(log_so3(Rm.T @ pose.R))
                return [J]

            g.add_factor((("kf", j),), res_rot, jac_rot, information=mu_R,
                         key=f"rot{j}")
    if mu_t > 0.0:
        for j in opt:
            p = prev_of[j]
            if p is None:
                continue
            dt_m = mocap_t[j] - mocap_t[p]

            def res_tr(pj, pp, dt_m=dt_m):
                return dt_m - (pj.t - pp.t)

            def jac_tr(pj, pp):
                Jj = np.zeros((3, 6))
                Jj[:, :3] = -pj.R
                Jp = np.zeros((3, 6))
                Jp[:, :3] = pp.R
                return [Jj, Jp]

            g.add_factor((("kf", j), ("kf", p)), res_tr, jac_tr,
                         information=mu_t, key=f"trans{j}")

    report = solve_lm(g, max_iters=max_iters, marginalize_points=True)

    with map_.lock:
        for j in opt:
            map_.keyframes[j].pose = g.pose(("kf", j))
        for pid in free_pts:
            map_.points[pid].position = g.point(("pt", pid)).copy()
        map_.version += 1
    return report


# -- map hygiene ---------------------------------------------------------------

def cull_and_fuse(map_: SlamMap, current_kf_id, intrinsics: CameraIntrinsics,
                  *, pixel_sigma: float = 1.0, grace: int = CULL_GRACE_KFS,
                  min_observers: int = 2, merge_radius: float = MERGE_RADIUS,
                  chi2_gate: float = CULL_CHI2) -> SlamMap:
    """Drop stale observations and points, merge duplicate points.

    Observations are scrubbed by reprojection chi-square, under-observed
    points past their grace period are removed, points sharing a feature id
    are merged once their positions agree, and distinct features closer
    than merge_radius with a common observer collapse into one.
    """
    var = pixel_sigma ** 2
    with map_.lock:
        for kf_id, kf in map_.keyframes.items():
            if not kf.observations:
                continue
            pids = list(kf.observations)
            P = np.array([map_.points[p].position for p in pids])
            px = np.array([kf.observations[p][0] for p in pids])
            lv = np.array([kf.observations[p][1] for p in pids])
            y = kf.pose.inverse_transform(P)
            front = y[:, 2] > MIN_DEPTH
            chi2 = np.full(len(pids), np.inf)
            if front.any():
                d2 = np.sum((intrinsics.project(y[front]) - px[front]) ** 2,
                            axis=1)
                chi2[front] = d2 / (var * LEVEL_SCALE ** (2 * lv[front]))
            for i in np.flatnonzero(chi2 > chi2_gate):
                map_.remove_observation(kf_id, pids[i])

        for pid in list(map_.points):
            pt = map_.points[pid]
            aged = current_kf_id - pt.created_kf > grace
            if not pt.observations or (len(pt.observations) < min_observers
                                       and aged):
                map_.remove_point(pid)

        for fid in list(map_.by_feature):
            while len(map_.by_feature.get(fid, [])) > 1:
                pids = sorted(map_.by_feature[fid],
                              key=lambda p: (-len(map_.points[p].observations),
                                             p))
                keep, drop = pids[0], pids[-1]
                gap = np.linalg.norm(map_.points[keep].position
                                     - map_.points[drop].position)
                if gap > MERGE_RADIUS_SAME_FEATURE:
                    break
                map_.merge_points(keep, drop)

        pids = sorted(map_.points)
        if len(pids) >= 2:
            pos = np.array([map_.points[p].position for p in pids])
            for i, j in sorted(cKDTree(pos).query_pairs(merge_radius)):
                a, b = pids[i], pids[j]
                if a not in map_.points or b not in map_.points:
                    continue
                pa, pb = map_.points[a], map_.points[b]
                if not set(pa.observations) & set(pb.observations):
                    continue
                keep, drop = (a, b) if (len(pa.observations), -a) >= \
                    (len(pb.observations), -b) else (b, a)
                map_.merge_points(keep, drop)

        map_.version += 1
    return map_


# -- backend -------------------------------------------------------------------

class MappingBackend:
    """Consumes keyframe match sets: association, triangulation, hygiene, BA.

    Deterministic mode runs each step inline inside submit(). Otherwise a
    worker thread drains a queue and publishes map updates under the map
    lock, which is how tracking sees consistent snapshots.
    """

    def __init__(self, map_: SlamMap, intrinsics: CameraIntrinsics, weights,
                 *, mocap_to_slam: Optional[SimTransform] = None,
                 pixel_sigma: float = 1.0, window: int = BA_WINDOW,
                 use_confidence: bool = True, aggregator: str = "max",
                 deterministic: bool = True, ba_max_iters: int = 8,
                 loop_closer=None):
        self.map = map_
        self.intrinsics = intrinsics
        self.weights = dict(weights)
        self.mocap_to_slam = (mocap_to_slam if mocap_to_slam is not None
                              else SimTransform(np.eye(3), np.zeros(3), 1.0))
        self.pixel_sigma = pixel_sigma
        self.window = window
        self.use_confidence = use_confidence
        self.aggregator = aggregator
        self.deterministic = deterministic
        self.ba_max_iters = ba_max_iters
        self.loop_closer = loop_closer
        self.last_report: Optional[SolveReport] = None
        self.ba_failures = 0
        # feature_id -> list of (kf_id, pixel, level) awaiting triangulation
        self._candidates: dict = {}
        self._queue: Optional[queue.Queue] = None
        self._worker = None
        if not deterministic:
            self._queue = queue.Queue()
            self._worker = threading.Thread(target=self._drain, daemon=True)
            self._worker.start()

    def submit(self, kf_id, feature_ids, pixels, levels):
        """Hand over a new keyframe's full match set."""
        item = (kf_id, np.asarray(feature_ids).copy(),
                np.asarray(pixels, dtype=float).copy(),
                np.asarray(levels).copy())
        if self.deterministic:
            self._process(*item)
        else:
            self._queue.put(item)

    def flush(self):
        if self._queue is not None:
            self._queue.join()

    def stop(self):
        if self._queue is not None:
            self._queue.put(None)
            self._worker.join()
            self._queue = None
            self._worker = None

    def _drain(self):
        while True:
            item = self._queue.get()
            try:
                if item is None:
                    return
                self._process(*item)
            finally:
                self._queue.task_done()

    # -- pipeline steps ----------------------------------------------------

    def _process(self, kf_id, feature_ids, pixels, levels):
        m = self.map
        with m.lock:
            kf = m.keyframes[kf_id]
            for fid, px, lv in zip(feature_ids, pixels, levels):
                pid = self._associate(kf, int(fid), px)
                if pid is not None:
                    m.add_observation(kf_id, pid, px, int(lv))
                else:
                    stash = self._candidates.setdefault(int(fid), [])
                    stash.append((kf_id, px.copy(), int(lv)))
                    del stash[:-CANDIDATE_STASH]
            self._triangulate_candidates(kf_id)
            cull_and_fuse(m, kf_id, self.intrinsics,
                          pixel_sigma=self.pixel_sigma)
        # Window ends at the submitted keyframe: newer ones may already be
        # in the map (async producer) but are not processed yet.
        with m.lock:
            window_ids = sorted(k for k in m.keyframes
                                if k <= kf_id)[-self.window:]
        if len(m.keyframes) >= 2 and m.points:
            try:
                self.last_report = local_bundle_adjust(
                    m, window_ids, self.weights,
                    self.mocap_to_slam, self.intrinsics,
                    pixel_sigma=self.pixel_sigma,
                    use_confidence=self.use_confidence,
                    aggregator=self.aggregator, max_iters=self.ba_max_iters)
            except SingularSystem:
                self.ba_failures += 1
        if self.loop_closer is not None:
            self.loop_closer.close(kf_id)

    def _associate(self, kf: Keyframe, fid: int, pixel):
        """Existing point for this feature if it projects close enough."""
        m = self.map
        best, best_err = None, PROJ_GATE_PX
        for pid in m.by_feature.get(fid, []):
            if pid in kf.observations:
                return pid
            y = kf.pose.inverse_transform(m.points[pid].position)
            if y[2] <= MIN_DEPTH:
                continue
            err = np.linalg.norm(self.intrinsics.project(y) - pixel)
            if err <= best_err:
                best, best_err = pid, err
        return best

    def _triangulate_candidates(self, kf_id):
        m = self.map
        sig = self.pixel_sigma
        done = []
        for fid, stash in self._candidates.items():
            if stash[-1][0] != kf_id or len(stash) < 2:
                continue
            pairs = [(np.linalg.norm(m.keyframes[a[0]].pose.t
                                     - m.keyframes[b[0]].pose.t), a, b)
                     for i, a in enumerate(stash) for b in stash[i + 1:]]
            pairs.sort(key=lambda p: -p[0])
            tries = [pairs[0]]
            if len(pairs) > 1:
                tries.append((0.0, stash[-2], stash[-1]))
            for _, oa, ob in tries:
                gate = max(MAX_REPROJ_PX,
                           2.0 + 3.0 * sig * LEVEL_SCALE ** max(oa[2], ob[2]))
                try:
                    X, ok = triangulate_rays(
                        m.keyframes[oa[0]].pose, m.keyframes[ob[0]].pose,
                        oa[1][None, :], ob[1][None, :], self.intrinsics,
                        max_reproj_px=gate,
                        min_parallax=TRI_PARALLAX_SIN)
                except DegenerateGeometry:
                    continue
                if not ok[0]:
                    continue
                pt = m.add_point(fid, X[0], created_kf=kf_id)
                for okf, opx, olv in stash:
                    y = m.keyframes[okf].pose.inverse_transform(pt.position)
                    if y[2] <= MIN_DEPTH:
                        continue
                    err = np.linalg.norm(self.intrinsics.project(y) - opx)
                    if err <= gate:
                        m.add_observation(okf, pt.point_id, opx, olv)
                done.append(fid)
                break
            else:
                if len(stash) >= 5:
                    del stash[0]
        for fid in done:
            del self._candidates[fid]
        stale = [fid for fid, stash in self._candidates.items()
                 if kf_id - stash[-1][0] > CANDIDATE_MAX_AGE]
        for fid in stale:
            del self._candidates[fid]

