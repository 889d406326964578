"""Sim(3) alignment tests: exact recovery, noise behavior, degeneracy."""
import numpy as np
import pytest

from mocapslam.calib import (
    CalibrationReport,
    DegenerateConfiguration,
    NegativeScaleGeometry,
    align_sim3,
    calibrate,
)
from mocapslam.liegroup import SimTransform, exp_so3


def random_cloud(rng, n=120, scale=3.0):
    return rng.normal(scale=scale, size=(n, 3))


def random_sim3(rng, s_range=(0.5, 2.0)):
    return SimTransform(exp_so3(rng.normal(size=3)), rng.normal(size=3),
                        rng.uniform(*s_range))


class TestExactRecovery:
    def test_recovers_random_transforms(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            G = random_sim3(rng)
            src = random_cloud(rng)
            dst = G.apply(src)
            E = align_sim3(src, dst)
            assert abs(E.s - G.s) < 1e-9
            assert np.allclose(E.R, G.R, atol=1e-9)
            assert np.allclose(E.t, G.t, atol=1e-9)

    def test_identity_on_identical_clouds(self):
        rng = np.random.default_rng(1)
        src = random_cloud(rng)
        E = align_sim3(src, src)
        assert abs(E.s - 1.0) < 1e-12
        assert np.allclose(E.R, np.eye(3), atol=1e-12)
        assert np.allclose(E.t, 0.0, atol=1e-12)

    def test_planar_cloud_succeeds(self):
        # Walking trajectories are nearly planar; that must be fine.
        rng = np.random.default_rng(2)
        src = random_cloud(rng)
        src[:, 2] = 1.6 + rng.normal(scale=0.01, size=len(src))
        G = random_sim3(rng)
        E = align_sim3(src, G.apply(src))
        assert abs(E.s - G.s) < 1e-6


class TestNoise:
    def test_scale_error_under_noise(self):
        # 1 cm noise on a multi-meter walk: scale recovered to < 0.5%.
        rng = np.random.default_rng(3)
        t = np.linspace(0.0, 4 * np.pi, 300)
        src = np.stack([3.0 * np.cos(t), 2.0 * np.sin(t),
                        1.6 + 0.02 * np.sin(5 * t)], axis=1)
        for _ in range(10):
            G = random_sim3(rng)
            dst = G.apply(src) + rng.normal(scale=0.01, size=src.shape)
            E = align_sim3(src, dst)
            assert abs(E.s - G.s) / G.s < 0.005

    def test_report_rms_tracks_noise(self):
        rng = np.random.default_rng(4)
        src = random_cloud(rng, n=400)
        sigma = 0.01
        dst = src + rng.normal(scale=sigma, size=src.shape)
        rep = calibrate(src, dst)
        assert isinstance(rep, CalibrationReport)
        assert 0.5 * sigma * np.sqrt(3) < rep.rms_error < 1.5 * sigma * np.sqrt(3)
        assert rep.n_points == 400


class TestDegeneracy:
    def test_too_few_points(self):
        with pytest.raises(DegenerateConfiguration):
            align_sim3(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_collinear_rejected(self):
        t = np.linspace(0.0, 10.0, 100)
        line = np.stack([t, 2 * t, -t], axis=1)
        with pytest.raises(DegenerateConfiguration):
            align_sim3(line, line + 1.0)

    def test_nearly_collinear_rejected(self):
        rng = np.random.default_rng(5)
        t = np.linspace(0.0, 10.0, 100)
        line = np.stack([t, np.zeros_like(t), np.zeros_like(t)], axis=1)
        line += rng.normal(scale=1e-4, size=line.shape)
        with pytest.raises(DegenerateConfiguration):
            align_sim3(line, line * 2.0)

    def test_mirror_rejected(self):
        rng = np.random.default_rng(6)
        src = random_cloud(rng)
        dst = src * np.array([-1.0, 1.0, 1.0])  # reflection
        with pytest.raises(NegativeScaleGeometry):
            align_sim3(src, dst)

    def test_mismatched_shapes(self):
        with pytest.raises(ValueError):
            align_sim3(np.zeros((5, 3)), np.zeros((6, 3)))
