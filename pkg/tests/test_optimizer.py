"""Factor-graph solver tests.

Oracles: synthetic problems with known ground truth and zero noise
(recovery to machine precision), the dense solve as reference for the
marginalized path, and per-observation generic factors as reference for
the batched reprojection block.
"""
import numpy as np
import pytest

from mocapslam.camera import CameraIntrinsics
from mocapslam.liegroup import RigidPose, exp_so3, oplus_pose, skew, projection_jacobian
from mocapslam.optimizer import (
    FactorGraph,
    SingularSystem,
    classify_inliers,
    huber_cost,
    huber_weight,
    numeric_jacobian,
    solve_lm,
)

K = CameraIntrinsics(fx=458.0, fy=458.0, cx=320.0, cy=240.0)


def make_scene(n_points, n_poses, seed, radius=4.0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-2.0, 2.0, size=(n_points, 3)) + np.array([0, 0, radius])
    poses = []
    for i in range(n_poses):
        ang = 0.15 * i
        t = np.array([np.sin(ang) * 1.0, 0.1 * i, 0.0])
        poses.append(RigidPose(exp_so3([0.0, ang * 0.3, 0.0]), t))
    return pts, poses


def pixels_for(pose, pts):
    y = pose.inverse_transform(pts)
    return K.project(y)


def perturb(pose, rng, rot=0.03, trans=0.05):
    return oplus_pose(pose, rng.normal(scale=rot, size=3),
                      rng.normal(scale=trans, size=3))


class TestPoseOnly:
    def test_recovers_pose_zero_noise(self):
        rng = np.random.default_rng(0)
        pts, poses = make_scene(60, 1, seed=1)
        T_true = poses[0]
        g = FactorGraph()
        g.add_pose("T", perturb(T_true, rng))
        for i, p in enumerate(pts):
            g.add_point(("p", i), p, fixed=True)
        g.add_reprojection_block("T", [("p", i) for i in range(len(pts))],
                                 pixels_for(T_true, pts), K,
                                 np.ones(len(pts)), key="obs")
        rep = solve_lm(g, max_iters=50)
        assert rep.converged
        assert rep.final_cost < 1e-12
        assert np.allclose(g.pose("T").t, T_true.t, atol=1e-8)
        assert np.allclose(g.pose("T").R, T_true.R, atol=1e-8)

    def test_cost_trace_monotone(self):
        rng = np.random.default_rng(2)
        pts, poses = make_scene(40, 1, seed=3)
        g = FactorGraph()
        g.add_pose("T", perturb(poses[0], rng, rot=0.1, trans=0.2))
        for i, p in enumerate(pts):
            g.add_point(("p", i), p, fixed=True)
        g.add_reprojection_block("T", [("p", i) for i in range(len(pts))],
                                 pixels_for(poses[0], pts), K, np.ones(len(pts)))
        rep = solve_lm(g, max_iters=30)
        assert all(b <= a + 1e-12 for a, b in zip(rep.cost_trace,
                                                  rep.cost_trace[1:]))

    def test_converged_immediately_at_solution(self):
        pts, poses = make_scene(30, 1, seed=4)
        g = FactorGraph()
        g.add_pose("T", poses[0])
        for i, p in enumerate(pts):
            g.add_point(("p", i), p, fixed=True)
        g.add_reprojection_block("T", [("p", i) for i in range(len(pts))],
                                 pixels_for(poses[0], pts), K, np.ones(len(pts)))
        rep = solve_lm(g)
        assert rep.converged
        assert rep.iterations == 0


class TestBundleAdjustment:
    def build(self, seed, marginalize_seedless=False):
        rng = np.random.default_rng(seed)
        pts, poses = make_scene(20, 4, seed=seed + 100)
        g = FactorGraph()
        for j, T in enumerate(poses):
            # First two poses fixed: pins the full rigid + scale gauge.
            fixed = j < 2
            g.add_pose(("T", j), T if fixed else perturb(T, rng), fixed=fixed)
        for i, p in enumerate(pts):
            g.add_point(("p", i), p + rng.normal(scale=0.05, size=3))
        for j, T in enumerate(poses):
            g.add_reprojection_block(("T", j), [("p", i) for i in range(len(pts))],
                                     pixels_for(T, pts), K, np.ones(len(pts)),
                                     key=f"kf{j}")
        return g, pts, poses

    def test_zero_noise_recovery_dense(self):
        g, pts, poses = self.build(seed=5)
        rep = solve_lm(g, max_iters=60)
        assert rep.final_cost < 1e-12
        for i, p in enumerate(pts):
            assert np.linalg.norm(g.point(("p", i)) - p) < 1e-6
        for j in (2, 3):
            assert np.allclose(g.pose(("T", j)).t, poses[j].t, atol=1e-6)

    def test_marginalized_matches_dense(self):
        g1, _, _ = self.build(seed=6)
        g2, _, _ = self.build(seed=6)
        solve_lm(g1, max_iters=60, marginalize_points=False)
        solve_lm(g2, max_iters=60, marginalize_points=True)
        for vid, v in g1.vertices.items():
            w = g2.vertices[vid]
            if v.kind == "pose":
                assert np.allclose(v.value.t, w.value.t, atol=1e-8)
                assert np.allclose(v.value.R, w.value.R, atol=1e-8)
            else:
                assert np.allclose(v.value, w.value, atol=1e-8)

    def test_single_damped_step_identical_both_paths(self):
        # One LM iteration with a fixed lambda must agree exactly.
        g1, _, _ = self.build(seed=7)
        g2, _, _ = self.build(seed=7)
        r1 = solve_lm(g1, max_iters=1, lambda_init=1e-3)
        r2 = solve_lm(g2, max_iters=1, lambda_init=1e-3,
                      marginalize_points=True)
        assert abs(r1.final_cost - r2.final_cost) < 1e-8 * max(1.0, r1.final_cost)
        for vid in g1.vertices:
            v, w = g1.vertices[vid], g2.vertices[vid]
            if v.kind == "pose":
                assert np.allclose(v.value.t, w.value.t, atol=1e-9)
            else:
                assert np.allclose(v.value, w.value, atol=1e-9)


class TestRobustAndClassify:
    def test_huber_cost_and_weight(self):
        delta2 = 5.991
        delta = np.sqrt(delta2)
        assert huber_cost(np.array([2.0]), delta2)[0] == pytest.approx(2.0)
        u = 25.0
        assert huber_cost(np.array([u]), delta2)[0] == pytest.approx(
            2 * delta * np.sqrt(u) - delta2)
        assert huber_weight(np.array([2.0]), delta2)[0] == pytest.approx(1.0)
        assert huber_weight(np.array([u]), delta2)[0] == pytest.approx(
            delta / np.sqrt(u))

    def test_outliers_downweighted_pose_recovered(self):
        rng = np.random.default_rng(8)
        pts, poses = make_scene(80, 1, seed=9)
        T_true = poses[0]
        px = pixels_for(T_true, pts)
        outliers = rng.random(len(pts)) < 0.15
        px[outliers] += rng.uniform(40.0, 120.0, size=(outliers.sum(), 2))
        g = FactorGraph()
        g.add_pose("T", perturb(T_true, rng, rot=0.02, trans=0.03))
        for i, p in enumerate(pts):
            g.add_point(("p", i), p, fixed=True)
        g.add_reprojection_block("T", [("p", i) for i in range(len(pts))],
                                 px, K, np.ones(len(pts)),
                                 huber_delta2=5.991, key="obs")
        solve_lm(g, max_iters=50)
        # Robust fit should land within a few mm despite 15% gross outliers.
        assert np.linalg.norm(g.pose("T").t - T_true.t) < 5e-3
        masks = classify_inliers(g, 5.991)
        assert masks["obs"][~outliers].all()
        assert not masks["obs"][outliers].any()

    def test_classify_threshold_dict(self):
        pts, poses = make_scene(10, 1, seed=10)
        g = FactorGraph()
        g.add_pose("T", poses[0])
        for i, p in enumerate(pts):
            g.add_point(("p", i), p, fixed=True)
        px = pixels_for(poses[0], pts)
        px[0] += 50.0
        g.add_reprojection_block("T", [("p", i) for i in range(len(pts))],
                                 px, K, np.ones(len(pts)), key="obs")
        masks = classify_inliers(g, {"obs": 5.991})
        assert not masks["obs"][0]
        assert masks["obs"][1:].all()


class TestGenericFactors:
    def test_block_equals_generic_factors(self):
        rng = np.random.default_rng(11)
        pts, poses = make_scene(25, 1, seed=12)
        T_true = poses[0]
        px = pixels_for(T_true, pts)
        T0 = perturb(T_true, rng)

        g_block = FactorGraph()
        g_block.add_pose("T", T0)
        for i, p in enumerate(pts):
            g_block.add_point(("p", i), p, fixed=True)
        g_block.add_reprojection_block("T", [("p", i) for i in range(len(pts))],
                                       px, K, np.ones(len(pts)))

        g_gen = FactorGraph()
        g_gen.add_pose("T", T0)

        def make_residual(i):
            def residual(T):
                y = T.inverse_transform(pts[i])
                return px[i] - K.project(y)
            return residual

        def make_jac(i):
            def jac(T):
                y = T.inverse_transform(pts[i])
                Jp = projection_jacobian(y, K.fx, K.fy)
                return [np.hstack([Jp, -Jp @ skew(y)])]
            return jac

        for i in range(len(pts)):
            g_gen.add_factor(["T"], make_residual(i), make_jac(i))

        r1 = solve_lm(g_block, max_iters=40)
        r2 = solve_lm(g_gen, max_iters=40)
        assert np.allclose(g_block.pose("T").t, g_gen.pose("T").t, atol=1e-9)
        assert np.allclose(g_block.pose("T").R, g_gen.pose("T").R, atol=1e-9)
        assert abs(r1.final_cost - r2.final_cost) < 1e-9

    def test_finite_difference_fallback(self):
        # Quadratic toy problem: pull a free point to two anchors.
        g = FactorGraph()
        g.add_point("x", np.array([5.0, -3.0, 2.0]))
        g.add_factor(["x"], lambda x: x - np.array([1.0, 1.0, 1.0]))
        g.add_factor(["x"], lambda x: x - np.array([3.0, 1.0, 1.0]),
                     information=1.0)
        rep = solve_lm(g, max_iters=20)
        assert rep.converged
        assert np.allclose(g.point("x"), [2.0, 1.0, 1.0], atol=1e-6)

    def test_numeric_jacobian_pose_matches_analytic(self):
        rng = np.random.default_rng(13)
        T = RigidPose(exp_so3(rng.normal(size=3)), rng.normal(size=3))
        x = rng.normal(size=3) + np.array([0.0, 0.0, 5.0])

        def residual(T):
            return T.inverse_transform(x)

        J = numeric_jacobian(residual, [T], ["pose"])[0]
        y = T.inverse_transform(x)
        J_true = np.hstack([-np.eye(3), skew(y)])
        assert np.allclose(J, J_true, atol=1e-6)

    def test_information_matrix_weighting(self):
        # Two conflicting anchors with 4:1 information pull 4/5 of the way.
        g = FactorGraph()
        g.add_point("x", np.zeros(3))
        g.add_factor(["x"], lambda x: x - np.array([1.0, 0.0, 0.0]),
                     information=4.0)
        g.add_factor(["x"], lambda x: x - np.array([0.0, 0.0, 0.0]),
                     information=1.0)
        solve_lm(g, max_iters=20)
        assert np.allclose(g.point("x"), [0.8, 0.0, 0.0], atol=1e-8)

    def test_singular_system_raises(self):
        g = FactorGraph()
        g.add_point("x", np.zeros(3))
        # Constrains only the first coordinate: y/z unconstrained.
        g.add_factor(["x"], lambda x: np.array([x[0] - 1.0]))
        with pytest.raises(SingularSystem):
            solve_lm(g, max_iters=5)

    def test_fixed_vertices_do_not_move(self):
        pts, poses = make_scene(15, 2, seed=14)
        g = FactorGraph()
        g.add_pose(("T", 0), poses[0], fixed=True)
        g.add_pose(("T", 1), perturb(poses[1], np.random.default_rng(15)))
        for i, p in enumerate(pts):
            g.add_point(("p", i), p, fixed=True)
        for j in range(2):
            g.add_reprojection_block(("T", j),
                                     [("p", i) for i in range(len(pts))],
                                     pixels_for(poses[j], pts), K,
                                     np.ones(len(pts)))
        solve_lm(g, max_iters=40)
        assert np.allclose(g.pose(("T", 0)).t, poses[0].t)
        assert np.allclose(g.pose(("T", 1)).t, poses[1].t, atol=1e-7)
