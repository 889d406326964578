"""Robust Levenberg-Marquardt over factor graphs.

Single numerical engine behind camera tracking, windowed bundle adjustment
and pose-graph relaxation. Vertices are SE(3) poses (6 dof, updated
right-multiplicatively) or 3D points. Factors are either generic (residual
plus optional analytic Jacobian; finite differences otherwise) or batched
reprojection blocks that evaluate many pinhole observations of one pose at
once, which is what keeps the Python solver fast enough for per-frame use.

Tangent ordering is translation-first: a pose step is [dt, dtheta] with
R <- R Exp(dtheta), t <- t + R dt.

Landmarks can be marginalized with a Schur complement on the 3x3
block-diagonal point Hessian; with damping applied before elimination the
result matches the dense solve exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .camera import CameraIntrinsics
from .liegroup import RigidPose, jr_inv, oplus_pose, skew

POSE_DIM = 6
POINT_DIM = 3

# chi2 charged for an observation at or behind the camera plane: large
# enough that a step pushing points behind the camera is always rejected.
BAD_DEPTH_CHI2 = 1e4
MIN_DEPTH = 1e-6

_LM_LAMBDA_CEIL = 1e12


class SingularSystem(RuntimeError):
    """Normal equations rank-deficient beyond what damping can rescue."""


class NonFinite(RuntimeError):
    """A residual or Jacobian evaluated to NaN or inf."""


def huber_cost(chi2: np.ndarray, delta2: Optional[float]) -> np.ndarray:
    """Huber-robustified cost of a (weighted) squared residual."""
    if delta2 is None:
        return chi2
    delta = np.sqrt(delta2)
    return np.where(chi2 <= delta2, chi2, 2.0 * delta * np.sqrt(chi2) - delta2)


def huber_weight(chi2: np.ndarray, delta2: Optional[float]) -> np.ndarray:
    """IRLS weight rho'(chi2); scales both H and g contributions."""
    if delta2 is None:
        return np.ones_like(np.asarray(chi2, dtype=float))
    delta = np.sqrt(delta2)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(chi2 <= delta2, 1.0, delta / np.sqrt(np.maximum(chi2, 1e-300)))
    return w


@dataclass
class Factor:
    """Generic residual over a tuple of vertices.

    residual_fn(*values) -> (m,). jacobian_fn(*values) -> list of (m, dim)
    blocks aligned with vertex_ids, or None to fall back to central finite
    differences. information is an (m, m) matrix or a scalar multiple of I.
    """

    vertex_ids: tuple
    residual_fn: Callable
    jacobian_fn: Optional[Callable] = None
    information: object = 1.0
    huber_delta2: Optional[float] = None
    key: Optional[str] = None


@dataclass
class ReprojectionBlock:
    """Batched pinhole observations of one pose.

    pixels (k,2) observed, point_ids the map/graph vertex per observation,
    weights (k,) the scalar information of each 2D residual (Omega = w I).
    """

    pose_id: object
    point_ids: list
    pixels: np.ndarray
    intrinsics: CameraIntrinsics
    weights: np.ndarray
    huber_delta2: Optional[float] = None
    key: Optional[str] = None


@dataclass
class _Vertex:
    kind: str  # "pose" | "point"
    value: object
    fixed: bool


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    cost_trace: list
    converged: bool
    inlier_masks: dict = field(default_factory=dict)


class FactorGraph:
    """Problem container: vertices with fixed flags plus factors."""

    def __init__(self):
        self.vertices: dict = {}
        self.factors: list[Factor] = []
        self.blocks: list[ReprojectionBlock] = []
        self._key_counter = 0

    # -- construction -----------------------------------------------------

    def add_pose(self, vid, pose: RigidPose, fixed: bool = False):
        self.vertices[vid] = _Vertex("pose", pose, fixed)

    def add_point(self, vid, x: np.ndarray, fixed: bool = False):
        self.vertices[vid] = _Vertex("point", np.asarray(x, dtype=float).copy(),
                                     fixed)

    def _auto_key(self, prefix):
        self._key_counter += 1
        return f"{prefix}{self._key_counter}"

    def add_factor(self, vertex_ids, residual_fn, jacobian_fn=None,
                   information=1.0, huber_delta2=None, key=None) -> str:
        key = key or self._auto_key("f")
        self.factors.append(Factor(tuple(vertex_ids), residual_fn, jacobian_fn,
                                   information, huber_delta2, key))
        return key

    def add_reprojection_block(self, pose_id, point_ids, pixels, intrinsics,
                               weights, huber_delta2=None, key=None) -> str:
        key = key or self._auto_key("b")
        pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
        weights = np.broadcast_to(np.asarray(weights, dtype=float),
                                  (pixels.shape[0],)).copy()
        self.blocks.append(ReprojectionBlock(pose_id, list(point_ids), pixels,
                                             intrinsics, weights, huber_delta2,
                                             key))
        return key

    # -- access ------------------------------------------------------------

    def pose(self, vid) -> RigidPose:
        v = self.vertices[vid]
        assert v.kind == "pose"
        return v.value

    def point(self, vid) -> np.ndarray:
        v = self.vertices[vid]
        assert v.kind == "point"
        return v.value


def numeric_jacobian(residual_fn, values, kinds, h: float = 1e-6):
    """Central-difference Jacobian blocks; poses perturbed via oplus."""
    blocks = []
    values = list(values)
    for i, kind in enumerate(kinds):
        if kind == "pose":
            dim = POSE_DIM
        else:
            dim = POINT_DIM
        r0 = np.asarray(residual_fn(*values), dtype=float)
        J = np.zeros((r0.size, dim))
        for k in range(dim):
            d = np.zeros(dim)
            d[k] = h
            plus = list(values)
            minus = list(values)
            if kind == "pose":
                plus[i] = oplus_pose(values[i], d[3:], d[:3])
                minus[i] = oplus_pose(values[i], -d[3:], -d[:3])
            else:
                plus[i] = values[i] + d
                minus[i] = values[i] - d
            J[:, k] = (np.asarray(residual_fn(*plus), dtype=float)
                       - np.asarray(residual_fn(*minus), dtype=float)) / (2 * h)
        blocks.append(J)
    return blocks


class _Problem:
    """Index maps plus assembly for one solve call."""

    def __init__(self, graph: FactorGraph):
        self.graph = graph
        self.pose_ids = [vid for vid, v in graph.vertices.items()
                         if v.kind == "pose" and not v.fixed]
        self.point_ids = [vid for vid, v in graph.vertices.items()
                          if v.kind == "point" and not v.fixed]
        self.pose_index = {vid: i for i, vid in enumerate(self.pose_ids)}
        self.point_index = {vid: i for i, vid in enumerate(self.point_ids)}
        self.n_pose = len(self.pose_ids)
        self.n_point = len(self.point_ids)
        self.P = POSE_DIM * self.n_pose
        self.L = POINT_DIM * self.n_point

        # Per-block gather tables: index into the free-point state or -1,
        # with fixed positions captured once.
        self._block_tables = []
        for blk in graph.blocks:
            free_idx = np.array([self.point_index.get(pid, -1)
                                 for pid in blk.point_ids], dtype=int)
            fixed_pos = np.zeros((len(blk.point_ids), 3))
            for j, pid in enumerate(blk.point_ids):
                if free_idx[j] < 0:
                    fixed_pos[j] = graph.vertices[pid].value
            self._block_tables.append((free_idx, fixed_pos))

    # -- state -------------------------------------------------------------

    def initial_state(self):
        poses = [self.graph.vertices[vid].value for vid in self.pose_ids]
        points = (np.stack([self.graph.vertices[vid].value
                            for vid in self.point_ids])
                  if self.point_ids else np.zeros((0, 3)))
        return poses, points

    def apply_step(self, state, dx):
        poses, points = state
        new_poses = []
        for i, T in enumerate(poses):
            seg = dx[POSE_DIM * i:POSE_DIM * (i + 1)]
            new_poses.append(oplus_pose(T, seg[3:], seg[:3]))
        new_points = points + dx[self.P:].reshape(-1, 3) if self.L else points
        return new_poses, new_points

    def write_back(self, state):
        poses, points = state
        for i, vid in enumerate(self.pose_ids):
            self.graph.vertices[vid].value = poses[i]
        for i, vid in enumerate(self.point_ids):
            self.graph.vertices[vid].value = points[i].copy()

    def _value_of(self, vid, state):
        poses, points = state
        v = self.graph.vertices[vid]
        if v.fixed:
            return v.value
        if v.kind == "pose":
            return poses[self.pose_index[vid]]
        return points[self.point_index[vid]]

    # -- evaluation --------------------------------------------------------

    def block_eval(self, bi, state, with_jacobians):
        """Residuals (k,2), chi2 (k,), and optional Jacobian pieces."""
        blk = self.graph.blocks[bi]
        free_idx, fixed_pos = self._block_tables[bi]
        poses, points = state
        T = self._value_of(blk.pose_id, state)
        pts = fixed_pos.copy()
        if self.L and (free_idx >= 0).any():
            sel = free_idx >= 0
            pts[sel] = points[free_idx[sel]]

        y = (pts - T.t) @ T.R  # camera-frame points, (k,3)
        z = y[:, 2]
        good = z > MIN_DEPTH
        K = blk.intrinsics
        e = np.zeros_like(blk.pixels)
        with np.errstate(divide="ignore", invalid="ignore"):
            proj = K.project(y)
        e[good] = blk.pixels[good] - proj[good]
        chi2 = np.where(good, blk.weights * np.sum(e * e, axis=1),
                        BAD_DEPTH_CHI2)
        if not with_jacobians:
            return e, chi2, good, None, None
        # J_p rows for each observation (k,2,3); zeroed where depth is bad.
        k = y.shape[0]
        Jp = np.zeros((k, 2, 3))
        zs = np.where(good, z, 1.0)
        Jp[:, 0, 0] = K.fx / zs
        Jp[:, 0, 2] = -K.fx * y[:, 0] / (zs * zs)
        Jp[:, 1, 1] = K.fy / zs
        Jp[:, 1, 2] = -K.fy * y[:, 1] / (zs * zs)
        Jp[~good] = 0.0
        # d e / d [dt, dtheta]: e = obs - pi(y); dy/dt = -I, dy/dtheta = y^.
        y_skew = np.zeros((k, 3, 3))
        y_skew[:, 0, 1] = -y[:, 2]
        y_skew[:, 0, 2] = y[:, 1]
        y_skew[:, 1, 0] = y[:, 2]
        y_skew[:, 1, 2] = -y[:, 0]
        y_skew[:, 2, 0] = -y[:, 1]
        y_skew[:, 2, 1] = y[:, 0]
        J_pose = np.concatenate([Jp, -np.einsum("kij,kjl->kil", Jp, y_skew)],
                                axis=2)  # (k,2,6)
        J_point = -np.einsum("kij,lj->kil", Jp, T.R)  # (k,2,3), dy/dx = R^T
        return e, chi2, good, J_pose, J_point

    def factor_eval(self, factor: Factor, state, with_jacobians):
        values = [self._value_of(vid, state) for vid in factor.vertex_ids]
        r = np.asarray(factor.residual_fn(*values), dtype=float).reshape(-1)
        if not np.all(np.isfinite(r)):
            raise NonFinite(f"factor {factor.key} residual not finite")
        info = factor.information
        if np.isscalar(info):
            chi2 = float(info) * float(r @ r)
        else:
            chi2 = float(r @ np.asarray(info) @ r)
        if not with_jacobians:
            return r, chi2, None
        kinds = [self.graph.vertices[vid].kind for vid in factor.vertex_ids]
        if factor.jacobian_fn is not None:
            J = [np.asarray(j, dtype=float) for j in factor.jacobian_fn(*values)]
        else:
            J = numeric_jacobian(factor.residual_fn, values, kinds)
        return r, chi2, J

    def cost(self, state) -> float:
        total = 0.0
        for bi, blk in enumerate(self.graph.blocks):
            _, chi2, _, _, _ = self.block_eval(bi, state, False)
            total += float(np.sum(huber_cost(chi2, blk.huber_delta2)))
        for f in self.graph.factors:
            _, chi2, _ = self.factor_eval(f, state, False)
            total += float(huber_cost(np.array(chi2), f.huber_delta2))
        return total

    # -- assembly ----------------------------------------------------------

    def assemble(self, state):
        """Return (Hpp, Hpl, Hll_blocks, bp, bl, cost) at the given state."""
        Hpp = np.zeros((self.P, self.P))
        Hpl = np.zeros((self.P, self.L))
        Hll = np.zeros((self.n_point, 3, 3))
        bp = np.zeros(self.P)
        bl = np.zeros(self.L)
        cost = 0.0

        for bi, blk in enumerate(self.graph.blocks):
            e, chi2, good, J_pose, J_point = self.block_eval(bi, state, True)
            cost += float(np.sum(huber_cost(chi2, blk.huber_delta2)))
            w = huber_weight(chi2, blk.huber_delta2) * blk.weights
            w = np.where(good, w, 0.0)
            free_idx, _ = self._block_tables[bi]
            pose_free = blk.pose_id in self.pose_index
            # residual convention: solve H dx = -g with g = J^T W r where
            # r = e and cost = e^T W e; blocks store e = obs - pred.
            if pose_free:
                pi = self.pose_index[blk.pose_id] * POSE_DIM
                wJ = J_pose * w[:, None, None]
                Hpp[pi:pi + 6, pi:pi + 6] += np.einsum("kmi,kmj->ij", wJ, J_pose)
                bp[pi:pi + 6] += np.einsum("kmi,km->i", wJ, e)
            sel = np.nonzero(free_idx >= 0)[0]
            if sel.size:
                Jl = J_point[sel]
                wl = w[sel]
                contrib = np.einsum("kmi,kmj->kij", Jl * wl[:, None, None], Jl)
                np.add.at(Hll, free_idx[sel], contrib)
                gl = np.einsum("kmi,km->ki", Jl * wl[:, None, None], e[sel])
                np.add.at(bl.reshape(-1, 3), free_idx[sel], gl)
                if pose_free:
                    cross = np.einsum("kmi,kmj->kij",
                                      J_pose[sel] * wl[:, None, None], Jl)
                    view = Hpl[pi:pi + 6].reshape(6, self.n_point, 3)
                    np.add.at(view, (slice(None), free_idx[sel]),
                              cross.transpose(1, 0, 2))

        for f in self.graph.factors:
            r, chi2, J = self.factor_eval(f, state, True)
            cost += float(huber_cost(np.array(chi2), f.huber_delta2))
            w = float(huber_weight(np.array(chi2), f.huber_delta2))
            info = f.information
            Omega = (float(info) * np.eye(r.size) if np.isscalar(info)
                     else np.asarray(info, dtype=float))
            entries = []
            for vid, Jb in zip(f.vertex_ids, J):
                v = self.graph.vertices[vid]
                if v.fixed:
                    continue
                if not np.all(np.isfinite(Jb)):
                    raise NonFinite(f"factor {f.key} jacobian not finite")
                if v.kind == "pose":
                    off, dim, is_point = self.pose_index[vid] * POSE_DIM, 6, False
                else:
                    off, dim, is_point = self.point_index[vid] * POINT_DIM, 3, True
                entries.append((off, dim, is_point, Jb))
            for off_i, dim_i, pt_i, Ji in entries:
                JtO = w * Ji.T @ Omega
                gi = JtO @ r
                if pt_i:
                    bl[off_i:off_i + dim_i] += gi
                else:
                    bp[off_i:off_i + dim_i] += gi
                for off_j, dim_j, pt_j, Jj in entries:
                    Hij = JtO @ Jj
                    if not pt_i and not pt_j:
                        Hpp[off_i:off_i + dim_i, off_j:off_j + dim_j] += Hij
                    elif not pt_i and pt_j:
                        Hpl[off_i:off_i + dim_i, off_j:off_j + dim_j] += Hij
                    elif pt_i and not pt_j:
                        Hpl[off_j:off_j + dim_j, off_i:off_i + dim_i] += Hij.T
                    else:
                        if off_i != off_j:
                            raise ValueError(
                                "factors coupling two distinct free points are "
                                "not supported")
                        Hll[off_i // 3] += Hij
        return Hpp, Hpl, Hll, bp, bl, cost


def _solve_step(Hpp, Hpl, Hll, bp, bl, lam, marginalize):
    """One damped solve; raises np.linalg.LinAlgError when not SPD."""
    n_point = Hll.shape[0]
    dHpp = Hpp + lam * np.diag(np.diag(Hpp))
    dHll = Hll + lam * Hll * np.eye(3)[None, :, :]
    if marginalize and n_point:
        Hll_inv = np.linalg.inv(dHll)
        W = Hpl.reshape(Hpl.shape[0], n_point, 3)
        WHinv = np.einsum("pkj,kji->pki", W, Hll_inv)
        S = dHpp - np.einsum("pki,qki->pq", WHinv, W)  # W Hll^-1 W^T
        rhs = -bp + np.einsum("pki,ki->p", WHinv, bl.reshape(-1, 3))
        L = np.linalg.cholesky(S)
        dxp = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        resid = (-bl.reshape(-1, 3)
                 - np.einsum("pki,p->ki", W, dxp))
        dxl = np.einsum("kij,kj->ki", Hll_inv, resid).reshape(-1)
        return np.concatenate([dxp, dxl])
    P, Lsz = Hpp.shape[0], 3 * n_point
    H = np.zeros((P + Lsz, P + Lsz))
    H[:P, :P] = dHpp
    H[:P, P:] = Hpl
    H[P:, :P] = Hpl.T
    for k in range(n_point):
        H[P + 3 * k:P + 3 * k + 3, P + 3 * k:P + 3 * k + 3] = dHll[k]
    b = np.concatenate([bp, bl])
    Lc = np.linalg.cholesky(H)
    return np.linalg.solve(Lc.T, np.linalg.solve(Lc, -b))


def solve_lm(graph: FactorGraph, max_iters: int = 20,
             lambda_init: Optional[float] = None, cost_tol: float = 1e-6,
             grad_tol: float = 1e-8, marginalize_points: bool = False
             ) -> SolveReport:
    """Levenberg-Marquardt with multiplicative damping.

    Updates vertex values in place and reports the final robust cost trace.
    Convergence: relative cost decrease < cost_tol, gradient infinity-norm
    < grad_tol, or max_iters.
    """
    prob = _Problem(graph)
    state = prob.initial_state()
    if prob.P + prob.L == 0:
        cost = prob.cost(state)
        return SolveReport(0, cost, cost, [cost], True,
                           _final_masks(prob, state))

    lam = lambda_init
    cost = None
    trace = []
    converged = False
    iterations = 0
    for _ in range(max_iters):
        Hpp, Hpl, Hll, bp, bl, cost = prob.assemble(state)
        if not trace:
            trace.append(cost)
        g_inf = max(np.max(np.abs(bp)) if bp.size else 0.0,
                    np.max(np.abs(bl)) if bl.size else 0.0)
        if g_inf < grad_tol:
            converged = True
            break
        if lam is None:
            diag_max = max(np.max(np.diag(Hpp)) if Hpp.size else 0.0,
                           np.max(Hll[:, [0, 1, 2], [0, 1, 2]]) if Hll.size
                           else 0.0)
            lam = 1e-4 * max(diag_max, 1e-12)
        accepted = False
        any_solve_ok = False
        while lam <= _LM_LAMBDA_CEIL:
            try:
                dx = _solve_step(Hpp, Hpl, Hll, bp, bl, lam,
                                 marginalize_points)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(dx)):
                lam *= 10.0
                continue
            any_solve_ok = True
            cand = prob.apply_step(state, dx)
            cand_cost = prob.cost(cand)
            if cand_cost < cost:
                state = cand
                lam = max(lam * 0.1, 1e-12)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            if not any_solve_ok:
                raise SingularSystem("normal equations singular at maximum "
                                     "damping")
            # Steps solvable but none reduce the cost: stalled at a minimum.
            converged = True
            break
        iterations += 1
        trace.append(cand_cost)
        if cost - cand_cost < cost_tol * max(cost, 1e-300):
            converged = True
            cost = cand_cost
            break
        cost = cand_cost

    prob.write_back(state)
    final_cost = trace[-1] if trace else prob.cost(state)
    return SolveReport(iterations, trace[0] if trace else final_cost,
                       final_cost, trace, converged,
                       _final_masks(prob, state))


def _final_masks(prob: _Problem, state) -> dict:
    masks = {}
    for bi, blk in enumerate(prob.graph.blocks):
        _, chi2, _, _, _ = prob.block_eval(bi, state, False)
        thr = blk.huber_delta2 if blk.huber_delta2 is not None else np.inf
        masks[blk.key] = chi2 <= thr
    for f in prob.graph.factors:
        _, chi2, _ = prob.factor_eval(f, state, False)
        thr = f.huber_delta2 if f.huber_delta2 is not None else np.inf
        masks[f.key] = bool(chi2 <= thr)
    return masks


def classify_inliers(graph: FactorGraph, chi2_threshold) -> dict:
    """Partition observations by current chi2 against a threshold.

    chi2_threshold is a float applied everywhere or a dict keyed like the
    factors/blocks. Returns {key: bool mask (blocks) | bool (factors)}.
    """
    prob = _Problem(graph)
    state = prob.initial_state()

    def thr_for(key):
        if isinstance(chi2_threshold, dict):
            return chi2_threshold.get(key, np.inf)
        return float(chi2_threshold)

    out = {}
    for bi, blk in enumerate(prob.graph.blocks):
        _, chi2, _, _, _ = prob.block_eval(bi, state, False)
        out[blk.key] = chi2 <= thr_for(blk.key)
    for f in prob.graph.factors:
        _, chi2, _ = prob.factor_eval(f, state, False)
        out[f.key] = bool(chi2 <= thr_for(f.key))
    return out
