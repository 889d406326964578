"""Pinhole camera model shared by the simulator and the estimators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 640
    height: int = 480

    def project(self, y: np.ndarray) -> np.ndarray:
        """Project camera-frame points (3,) or (N,3); caller gates on depth."""
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            z = y[2]
            return np.array([self.fx * y[0] / z + self.cx,
                             self.fy * y[1] / z + self.cy])
        z = y[:, 2]
        return np.stack([self.fx * y[:, 0] / z + self.cx,
                         self.fy * y[:, 1] / z + self.cy], axis=1)

    def in_image(self, px: np.ndarray, margin: float = 0.0) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        if px.ndim == 1:
            px = px[None, :]
        ok = ((px[:, 0] >= margin) & (px[:, 0] <= self.width - 1 - margin)
              & (px[:, 1] >= margin) & (px[:, 1] <= self.height - 1 - margin))
        return ok if ok.size > 1 else ok.reshape(-1)
