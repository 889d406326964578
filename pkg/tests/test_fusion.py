"""Fusion filter tests against hand kinematics and the batch MAP oracle."""
import numpy as np
import pytest

from conftest import spec_with
from oracles import batch_map_estimate
from mocapslam.fusion import (
    CameraObservation,
    FilterState,
    NonFinite,
    OutOfOrder,
    correct,
    measurement_covariance,
    predict,
    step,
)
from mocapslam.simworld import DT, build_scenario, mocap_stream


class _Frame:
    def __init__(self, timestamp, accel):
        self.timestamp = timestamp
        self.root_accel = np.asarray(accel, dtype=float)


class TestBasics:
    def test_initial_state_is_origin_at_rest(self):
        st = FilterState.initial()
        assert np.allclose(st.x, 0.0)
        assert np.allclose(st.P, 0.0)
        assert st.sigma == pytest.approx(st.dt)

    def test_measurement_covariance(self):
        R0 = measurement_covariance(0)
        assert np.allclose(R0, 1e6 * np.eye(3))
        R100 = measurement_covariance(100)
        assert R100[0, 0] == pytest.approx(1000.0 / (100 + 1e-3))

    def test_predict_kinematics(self):
        st = FilterState(np.array([1.0, 2.0, 3.0, 0.5, 0.0, -0.5]),
                         np.zeros((6, 6)), dt=0.1)
        a = np.array([0.0, 1.0, 0.0])
        out = predict(st, a)
        assert np.allclose(out.position, [1.05, 2.0, 2.95])
        assert np.allclose(out.velocity, [0.5, 0.1, -0.5])

    def test_predict_covariance_growth(self):
        st = FilterState.initial(dt=0.1)
        out = predict(st, np.zeros(3))
        assert np.allclose(out.P[3:, 3:], st.sigma**2 * np.eye(3))
        assert np.allclose(out.P[:3, :3], 0.0)
        # Velocity uncertainty couples into position on the next step.
        out2 = predict(out, np.zeros(3))
        assert out2.P[0, 0] > 0.0
        assert np.allclose(out2.P, out2.P.T)

    def test_correct_weight_grows_with_n(self):
        st = FilterState(np.zeros(6), np.eye(6) * 0.01)
        z = np.array([1.0, 0.0, 0.0])
        weak = correct(st, CameraObservation(z, n=5))
        strong = correct(st, CameraObservation(z, n=100000))
        assert np.linalg.norm(strong.position - z) < \
            np.linalg.norm(weak.position - z)

    def test_untracked_frame_is_near_noop(self):
        st = FilterState(np.zeros(6), np.eye(6) * 0.01)
        out = correct(st, CameraObservation(np.array([5.0, 0.0, 0.0]), n=0))
        assert np.linalg.norm(out.position) < 1e-6

    def test_relocalization_overwrites_position_only(self):
        x = np.array([1.0, 1.0, 1.0, 0.3, 0.2, 0.1])
        P = np.eye(6) * 0.04
        st = FilterState(x, P)
        z = np.array([9.0, 9.0, 9.0])
        out = correct(st, CameraObservation(z, n=50, relocalized=True))
        assert np.allclose(out.position, z)
        assert np.allclose(out.velocity, st.velocity)
        assert np.allclose(out.P, P)

    def test_out_of_order_rejected(self):
        st = FilterState.initial()
        st, _ = step(st, _Frame(0.1, np.zeros(3)))
        with pytest.raises(OutOfOrder):
            step(st, _Frame(0.1, np.zeros(3)))

    def test_non_finite_rejected(self):
        st = FilterState.initial()
        with pytest.raises(NonFinite):
            predict(st, np.array([np.nan, 0.0, 0.0]))
        with pytest.raises(NonFinite):
            correct(st, CameraObservation(np.array([np.inf, 0.0, 0.0]), n=5))

    def test_step_uses_previous_accel(self):
        # First step must integrate a_{-1} = 0, not the frame's own accel.
        st = FilterState.initial(dt=0.5)
        a0 = np.array([1.0, 0.0, 0.0])
        st, p = step(st, _Frame(0.0, a0))
        assert np.allclose(p, 0.0)
        assert np.allclose(st.velocity, 0.0)
        st, p = step(st, _Frame(0.5, np.zeros(3)))
        # Now a0 kicks in: v = a0*dt, position still lags one step.
        assert np.allclose(st.velocity, [0.5, 0.0, 0.0])
        assert np.allclose(p, 0.0)
        st, p = step(st, _Frame(1.0, np.zeros(3)))
        assert np.allclose(p, [0.25, 0.0, 0.0])


class TestAgainstGroundTruth:
    def test_exact_accel_no_corrections_tracks_truth(self, room_spec):
        # Zero noise: pure dead-reckoning from mocap accel is exact.
        scn = build_scenario(spec_with(room_spec, duration_s=6.0))
        frames = mocap_stream(scn)
        st = FilterState.initial()
        for k, f in enumerate(frames):
            st, p = step(st, f)
            assert np.allclose(p, scn.root_pos[k], atol=1e-9)

    def test_corrections_do_not_break_exactness(self, room_spec):
        scn = build_scenario(spec_with(room_spec, duration_s=6.0))
        frames = mocap_stream(scn)
        st = FilterState.initial()
        for k, f in enumerate(frames):
            obs = None
            if k % 2 == 0:
                obs = CameraObservation(scn.cam_t[k] - scn.root_to_cam[k],
                                        n=150)
            st, p = step(st, f, obs)
            assert np.allclose(p, scn.root_pos[k], atol=1e-9)


class TestBatchMapOracle:
    def test_filter_matches_batch_map(self):
        rng = np.random.default_rng(7)
        K = 90
        accels = rng.normal(scale=0.8, size=(K + 1, 3))
        st = FilterState.initial()
        observations = {}
        positions = {}
        for k in range(K + 1):
            obs = None
            if k % 2 == 0 and k > 0:
                z = rng.normal(scale=1.0, size=3)
                n = int(rng.integers(20, 300))
                observations[k] = (z, n)
                obs = CameraObservation(z, n=n)
            st, p = step(st, _Frame(k * DT, accels[k]), obs)
            positions[k] = p
        for k_check in (30, 60, 90):
            obs_sub = {k: v for k, v in observations.items() if k <= k_check}
            p_map, _ = batch_map_estimate(accels, obs_sub, DT, DT, k_check)
            assert np.linalg.norm(positions[k_check] - p_map) < 1e-6

    def test_velocity_matches_batch_map(self):
        rng = np.random.default_rng(8)
        K = 60
        accels = rng.normal(scale=0.5, size=(K + 1, 3))
        st = FilterState.initial()
        observations = {}
        for k in range(K + 1):
            obs = None
            if k % 3 == 0 and k > 0:
                z = rng.normal(scale=0.5, size=3)
                observations[k] = (z, 80)
                obs = CameraObservation(z, n=80)
            st, _ = step(st, _Frame(k * DT, accels[k]), obs)
        _, v_map = batch_map_estimate(accels, observations, DT, DT, K)
        assert np.linalg.norm(st.velocity - v_map) < 1e-6

    def test_covariance_stays_symmetric_psd(self):
        rng = np.random.default_rng(9)
        st = FilterState.initial()
        for k in range(500):
            obs = None
            if k % 2 == 0:
                obs = CameraObservation(rng.normal(size=3),
                                        n=int(rng.integers(0, 400)))
            st, _ = step(st, _Frame(k * DT, rng.normal(size=3)), obs)
            assert np.allclose(st.P, st.P.T, atol=1e-12)
            eig = np.linalg.eigvalsh(st.P)
            assert eig.min() > -1e-12
