"""Kalman updater for the global body translation.

Constant-velocity model driven by the mocap's global root acceleration,
corrected at camera frames by the root position implied by the tracked
camera pose. State is x = [p, v]; the transition uses the acceleration of
the previous frame, matching discrete Euler kinematics:

    p_k = p_{k-1} + v_{k-1} dt,   v_k = v_{k-1} + a_{k-1} dt.

Process noise enters only the velocity (sigma = dt by default) and the
measurement covariance shrinks with the tracker's inlier count n:
Sigma_cam = 1000 / (n + 1e-3) * I, in m^2, so an untracked frame (n = 0)
is a near no-op correction. On relocalization the position is overwritten
by the measurement while velocity and covariance keep their predicted
values. The filter starts exactly at the origin at rest (x = 0, P = 0).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

MEAS_VAR_SCALE = 1000.0
MEAS_VAR_EPS = 1e-3
DEFAULT_DT = 1.0 / 60.0


class OutOfOrder(ValueError):
    """Mocap frames must arrive with strictly increasing timestamps."""


class SingularInnovation(RuntimeError):
    """Innovation covariance not invertible; cannot occur with R > 0."""


class NonFinite(ValueError):
    """State, covariance, or input contains NaN or inf."""


@dataclass(frozen=True)
class CameraObservation:
    """Root position implied by a tracked camera frame.

    position = tracked camera position minus the body's root-to-camera
    offset; n is the tracker's inlier count; relocalized marks frames right
    after a relocalization or a loop-closure teleport.
    """

    position: np.ndarray
    n: int
    relocalized: bool = False


@dataclass(frozen=True)
class FilterState:
    x: np.ndarray            # [p, v], shape (6,)
    P: np.ndarray            # (6,6)
    dt: float = DEFAULT_DT
    sigma: float = DEFAULT_DT  # process noise std on velocity
    timestamp: Optional[float] = None
    last_accel: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.last_accel is None:
            object.__setattr__(self, "last_accel", np.zeros(3))

    @staticmethod
    def initial(dt: float = DEFAULT_DT, sigma: Optional[float] = None
                ) -> "FilterState":
        return FilterState(np.zeros(6), np.zeros((6, 6)), dt,
                           dt if sigma is None else sigma)

    @property
    def position(self) -> np.ndarray:
        return self.x[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.x[3:]


def _system(dt: float, sigma: float):
    A = np.eye(6)
    A[:3, 3:] = dt * np.eye(3)
    B = np.zeros((6, 3))
    B[3:, :] = dt * np.eye(3)
    H = np.zeros((3, 6))
    H[:, :3] = np.eye(3)
    Q = np.zeros((6, 6))
    Q[3:, 3:] = sigma * sigma * np.eye(3)
    return A, B, H, Q


def measurement_covariance(n: int) -> np.ndarray:
    return (MEAS_VAR_SCALE / (n + MEAS_VAR_EPS)) * np.eye(3)


def predict(state: FilterState, accel: np.ndarray) -> FilterState:
    accel = np.asarray(accel, dtype=float)
    if not np.all(np.isfinite(accel)):
        raise NonFinite("acceleration input not finite")
    A, B, _, Q = _system(state.dt, state.sigma)
    x = A @ state.x + B @ accel
    P = A @ state.P @ A.T + Q
    return replace(state, x=x, P=0.5 * (P + P.T))


def correct(state: FilterState, obs: CameraObservation) -> FilterState:
    z = np.asarray(obs.position, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NonFinite("camera measurement not finite")
    if obs.relocalized:
        # Trust the relocalized camera absolutely for position; keep the
        # predicted velocity and covariance.
        x = state.x.copy()
        x[:3] = z
        return replace(state, x=x)
    A, B, H, Q = _system(state.dt, state.sigma)
    R = measurement_covariance(obs.n)
    S = H @ state.P @ H.T + R
    try:
        K = np.linalg.solve(S, H @ state.P).T  # P H^T S^-1
    except np.linalg.LinAlgError as e:
        raise SingularInnovation(str(e)) from e
    x = state.x + K @ (z - H @ state.x)
    P = (np.eye(6) - K @ H) @ state.P
    if not np.all(np.isfinite(x)):
        raise NonFinite("corrected state not finite")
    return replace(state, x=x, P=0.5 * (P + P.T))


def step(state: FilterState, mocap_frame, obs: Optional[CameraObservation]
         = None):
    """One 60 Hz update; returns (new state, root position output).

    Predicts with the PREVIOUS frame's acceleration, then corrects if a
    camera observation is present.
    """
    ts = float(mocap_frame.timestamp)
    if state.timestamp is not None and ts <= state.timestamp:
        raise OutOfOrder(f"timestamp {ts} after {state.timestamp}")
    st = predict(state, state.last_accel)
    if obs is not None:
        st = correct(st, obs)
    st = replace(st, timestamp=ts,
                 last_accel=np.asarray(mocap_frame.root_accel, dtype=float))
    return st, st.position.copy()
