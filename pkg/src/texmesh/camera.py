"""Viewing-sphere camera.

Convention (object frame is z-up; camera frame is x right, y down, z forward):

* azimuth ``az`` rotates the camera about the object z axis; at ``az = 0`` the
  camera sits on the -y axis looking toward +y.
* elevation ``el`` raises the camera above the xy-plane, so its centre is
  ``d * (sin az cos el, -cos az cos el, sin el)``.
* in-plane rotation ``theta`` rolls the image about the optical axis.
* extrinsics map object points as ``X_cam = R @ X + t`` with ``t = (0, 0, d)``.

Intrinsics are a pinhole with focal ``focal`` (pixels) and the principal point
at the image centre; pixel (row i, col j) has centre ``(j + 0.5, i + 0.5)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

_BASE = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


@dataclass
class CameraPose:
    azimuth: float
    elevation: float
    theta: float
    distance: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.azimuth, self.elevation, self.theta, self.distance)

    def extrinsics(self):
        return pose_to_extrinsics(*self.as_tuple())

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics()[0]


@dataclass
class Intrinsics:
    focal: float
    height: int
    width: int

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    def scaled(self, height: int, width: int) -> "Intrinsics":
        """Same field of view at another resolution."""
        return Intrinsics(self.focal * width / self.width, height, width)


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def pose_to_extrinsics(azimuth, elevation, theta, distance):
    """World-to-camera ``(R, t)`` for a camera on the viewing sphere."""
    if not distance > 0:
        raise ValueError("camera distance must be positive")
    R = _rz(theta) @ _rx(elevation) @ _BASE @ _rz(azimuth).T
    return R, np.array([0.0, 0.0, float(distance)])


def camera_center(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    return -R.T @ t


def rotation_torch(az: torch.Tensor, el: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Differentiable counterpart of the rotation in :func:`pose_to_extrinsics`."""
    one, zero = torch.ones_like(az), torch.zeros_like(az)

    def rz(a):
        c, s = torch.cos(a), torch.sin(a)
        return torch.stack([torch.stack([c, -s, zero]), torch.stack([s, c, zero]),
                            torch.stack([zero, zero, one])])

    def rx(a):
        c, s = torch.cos(a), torch.sin(a)
        return torch.stack([torch.stack([one, zero, zero]), torch.stack([zero, c, -s]),
                            torch.stack([zero, s, c])])

    base = torch.as_tensor(_BASE, dtype=az.dtype)
    return rz(theta) @ rx(el) @ base @ rz(az).T


def project(points_cam: np.ndarray, K: Intrinsics) -> np.ndarray:
    z = points_cam[:, 2]
    return np.stack([K.focal * points_cam[:, 0] / z + K.cx, K.focal * points_cam[:, 1] / z + K.cy], 1)


def rotation_angle(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
