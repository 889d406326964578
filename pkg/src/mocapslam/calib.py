"""Closed-form Sim(3) alignment between the mocap and SLAM frames.

Fits dst ~ s R src + t over paired 3D positions (typically camera
positions sampled along a calibration walk) in closed form via the SVD of
the cross-covariance. Mirror geometries are rejected rather than absorbed
into a reflection, and near-collinear point sets are refused because they
leave the rotation about the line unobservable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .liegroup import SimTransform

# Second-largest principal extent must clear this fraction of the largest;
# guards collinear configurations while still accepting planar walks.
SPREAD_RATIO_MIN = 0.01


class DegenerateConfiguration(ValueError):
    """Point set too small or too collinear to pin down the alignment."""


class NegativeScaleGeometry(ValueError):
    """Best-fit map is a reflection; the data cannot come from a Sim(3)."""


@dataclass(frozen=True)
class CalibrationReport:
    transform: SimTransform
    rms_error: float
    n_points: int
    spread: np.ndarray  # singular values of the centered source cloud


def align_sim3(src: np.ndarray, dst: np.ndarray) -> SimTransform:
    """Least-squares Sim(3) with dst ~ transform.apply(src)."""
    return calibrate(src, dst).transform


def calibrate(src: np.ndarray, dst: np.ndarray) -> CalibrationReport:
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("source and destination must pair up")
    n = len(src)
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 pairs, got {n}")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    A = src - mu_s
    B = dst - mu_d

    spread = np.linalg.svd(A, compute_uv=False) / np.sqrt(n)
    if spread[1] < SPREAD_RATIO_MIN * spread[0] or spread[0] <= 0.0:
        raise DegenerateConfiguration(
            f"source spread {spread} too collinear for a unique alignment")

    cov = B.T @ A / n
    U, S, Vt = np.linalg.svd(cov)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0.0:
        raise NegativeScaleGeometry("paired clouds are mirror images")
    R = U @ Vt
    var_s = np.mean(np.sum(A * A, axis=1))
    s = float(np.sum(S) / var_s)
    if s <= 0.0:
        raise NegativeScaleGeometry(f"non-positive scale {s}")
    t = mu_d - s * (R @ mu_s)
    G = SimTransform(R, t, s)

    resid = dst - G.apply(src)
    rms = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
    return CalibrationReport(G, rms, n, spread)
