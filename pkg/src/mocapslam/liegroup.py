"""Minimal Lie-group toolkit for the estimators.

Rotations are plain 3x3 orthonormal numpy arrays. Rigid and similarity
transforms are small frozen dataclasses on top of them. All tangent
vectors follow the right-multiplicative convention used by the solvers:

    R  (+) dtheta = R @ Exp(dtheta)
    t  (+) dt     = t + R @ dt

so pose perturbations live in the camera (body) frame. SE(3) tangents are
ordered [rho, theta] with rho the translational part.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Angle below which the trig-free Taylor branches are used.
SMALL_ANGLE = 1e-6
# Compositions between polar re-orthonormalizations of a RigidPose chain.
RENORM_PERIOD = 1000


class NonPositiveDepth(ValueError):
    """Projection requested for a point at or behind the camera plane."""


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def vee(M: np.ndarray) -> np.ndarray:
    """Inverse of skew for an antisymmetric matrix."""
    return np.array([M[2, 1], M[0, 2], M[1, 0]])


def exp_so3(v: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of a rotation vector."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    V = skew(v)
    if theta < SMALL_ANGLE:
        # sin/theta ~ 1 - theta^2/6, (1-cos)/theta^2 ~ 1/2 - theta^2/24
        a = 1.0 - theta * theta / 6.0
        b = 0.5 - theta * theta / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * V + b * (V @ V)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R, angle in [0, pi].

    Near pi the usual (R - R^T)/(2 sin theta) formula loses the axis, so it
    is recovered from the largest diagonal entry of (R + I)/2 = a a^T.
    """
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w = vee(R - R.T) * 0.5  # = sin(theta) * axis
    if theta < SMALL_ANGLE:
        # Log(R) ~ (1 + theta^2/6) * vee(R - R^T)/2
        return w * (1.0 + theta * theta / 6.0)
    if np.sin(theta) < 1e-6:
        # theta ~ pi: (R + I)/2 = a a^T, take the best-conditioned column.
        B = (R + np.eye(3)) * 0.5
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(B[k, k])
        axis /= np.linalg.norm(axis)
        # Keep the sign consistent with the antisymmetric part when usable.
        if np.dot(axis, w) < 0.0:
            axis = -axis
        return theta * axis
    return theta * w / np.sin(theta)


def so3_left_jacobian(v: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3); also the V matrix coupling SE(3) translation."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    V = skew(v)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * V + (V @ V) / 6.0
    b = (1.0 - np.cos(theta)) / (theta * theta)
    c = (theta - np.sin(theta)) / (theta ** 3)
    return np.eye(3) + b * V + c * (V @ V)


def jr_inv(v: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3).

    jr_inv(v) maps a right perturbation of Exp(v) to the change of the log:
    Log(Exp(v) Exp(d)) ~ v + jr_inv(v) @ d. Requires ||v|| < 2*pi.
    """
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v)
    if theta >= 2.0 * np.pi:
        raise ValueError(f"jr_inv undefined at ||v|| = {theta:.6f} >= 2*pi")
    V = skew(v)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * V + (V @ V) / 12.0
    a = v / theta
    half = 0.5 * theta
    cot_half = half / np.tan(half)
    return (cot_half * np.eye(3)
            + (1.0 - cot_half) * np.outer(a, a)
            + half * skew(a))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix by polar decomposition (det fixed to +1)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def slerp(Ra: np.ndarray, Rb: np.ndarray, alpha: float) -> np.ndarray:
    """Geodesic interpolation from Ra toward Rb by fraction alpha."""
    return Ra @ exp_so3(alpha * log_so3(Ra.T @ Rb))


def projection_jacobian(y: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """2x3 Jacobian of pinhole projection wrt the camera-frame point y."""
    if y[2] <= 0.0:
        raise NonPositiveDepth(f"point depth {y[2]:.6f} <= 0")
    z = y[2]
    return np.array([
        [fx / z, 0.0, -fx * y[0] / (z * z)],
        [0.0, fy / z, -fy * y[1] / (z * z)],
    ])


@dataclass(frozen=True)
class RigidPose:
    """SE(3) element: R maps camera to world, t is the position in world.

    A camera-frame point y corresponds to the world point R @ y + t.
    Long composition chains are re-orthonormalized every RENORM_PERIOD
    steps via polar decomposition.
    """

    R: np.ndarray
    t: np.ndarray
    gen: int = field(default=0, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidPose") -> "RigidPose":
        R = self.R @ other.R
        t = self.R @ other.t + self.t
        gen = max(self.gen, other.gen) + 1
        if gen >= RENORM_PERIOD:
            return RigidPose(orthonormalize(R), t, 0)
        return RigidPose(R, t, gen)

    def inverse(self) -> "RigidPose":
        return RigidPose(self.R.T, -self.R.T @ self.t, self.gen)

    def orthonormalized(self) -> "RigidPose":
        """Projection back onto SE(3), killing accumulated round-off shear.

        Needed wherever a pose feeds back into its own next estimate: the
        shear survives right-multiplicative updates and compounds
        geometrically through such loops.
        """
        return RigidPose(orthonormalize(self.R), self.t, 0)

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Map local points (3,) or (N,3) into the parent frame."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.R @ x + self.t
        return x @ self.R.T + self.t

    def inverse_transform(self, x: np.ndarray) -> np.ndarray:
        """Map parent-frame points into the local (camera) frame."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.R.T @ (x - self.t)
        return (x - self.t) @ self.R

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T


def oplus_pose(T: RigidPose, dtheta: np.ndarray, dt: np.ndarray) -> RigidPose:
    """Right-multiplicative pose update used by all solvers."""
    R = T.R @ exp_so3(dtheta)
    t = T.t + T.R @ np.asarray(dt, dtype=float)
    if T.gen + 1 >= RENORM_PERIOD:
        return RigidPose(orthonormalize(R), t, 0)
    return RigidPose(R, t, T.gen + 1)


def exp_se3(xi: np.ndarray) -> RigidPose:
    """SE(3) exponential; xi = [rho, theta]."""
    xi = np.asarray(xi, dtype=float)
    rho, theta_v = xi[:3], xi[3:]
    R = exp_so3(theta_v)
    t = so3_left_jacobian(theta_v) @ rho
    return RigidPose(R, t)


def log_se3(T: RigidPose) -> np.ndarray:
    """SE(3) logarithm; inverse of exp_se3 on the principal branch."""
    theta_v = log_so3(T.R)
    # V(theta) is invertible for ||theta|| <= pi, so solve instead of the
    # series-expanded closed form (which degenerates near pi).
    rho = np.linalg.solve(so3_left_jacobian(theta_v), T.t)
    return np.concatenate([rho, theta_v])


@dataclass(frozen=True)
class SimTransform:
    """Sim(3) element x -> s * R @ x + t with s > 0."""

    R: np.ndarray
    t: np.ndarray
    s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))
        object.__setattr__(self, "s", float(self.s))
        if self.s <= 0.0:
            raise ValueError(f"similarity scale must be positive, got {self.s}")

    @staticmethod
    def identity() -> "SimTransform":
        return SimTransform(np.eye(3), np.zeros(3), 1.0)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.s * (self.R @ x) + self.t
        return self.s * (x @ self.R.T) + self.t

    def compose(self, other: "SimTransform") -> "SimTransform":
        """self o other: apply other first, then self."""
        return SimTransform(self.R @ other.R,
                            self.s * (self.R @ other.t) + self.t,
                            self.s * other.s)

    def inverse(self) -> "SimTransform":
        Rinv = self.R.T
        return SimTransform(Rinv, -(Rinv @ self.t) / self.s, 1.0 / self.s)
