"""Mocap-constrained monocular SLAM with a Kalman body-translation updater."""

from .liegroup import RigidPose, SimTransform
from .camera import CameraIntrinsics

__version__ = "0.1.0"

__all__ = ["RigidPose", "SimTransform", "CameraIntrinsics", "__version__"]
