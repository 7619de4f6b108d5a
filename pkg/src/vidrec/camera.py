"""Simple-radial pinhole cameras with COLMAP pose conventions.

Poses map world to camera coordinates, ``X_cam = R @ X_world + t``, with
``R`` stored as a unit quaternion ``(qw, qx, qy, qz)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

Z_MIN = 1e-6
UNDISTORT_ITERS = 20
UNDISTORT_TOL = 1e-12


class DivergentUndistortion(ArithmeticError):
    pass


def qvec_to_rotmat(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def rotmat_to_qvec(R) -> np.ndarray:
    """Quaternion with non-negative ``qw`` for a rotation matrix."""
    R = np.asarray(R, dtype=float)
    # symmetric 4x4 eigen-decomposition (numerically stable for all angles)
    Rxx, Ryx, Rzx, Rxy, Ryy, Rzy, Rxz, Ryz, Rzz = R.flat
    K = np.array([
        [Rxx - Ryy - Rzz, 0, 0, 0],
        [Ryx + Rxy, Ryy - Rxx - Rzz, 0, 0],
        [Rzx + Rxz, Rzy + Ryz, Rzz - Rxx - Ryy, 0],
        [Ryz - Rzy, Rzx - Rxz, Rxy - Ryx, Rxx + Ryy + Rzz],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(K)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    if q[0] < 0:
        q = -q
    return q


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    f: float
    cx: float
    cy: float
    k: float = 0.0
    model: str = "SIMPLE_RADIAL"

    def __post_init__(self):
        if self.model != "SIMPLE_RADIAL":
            raise ValueError(f"unsupported camera model {self.model}")
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")


@dataclass(frozen=True, eq=False)
class CameraPose:
    qvec: tuple
    tvec: tuple
    R: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        q = tuple(float(v) for v in self.qvec)
        t = tuple(float(v) for v in self.tvec)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"quaternion not unit norm: {q}")
        object.__setattr__(self, "qvec", q)
        object.__setattr__(self, "tvec", t)
        object.__setattr__(self, "R", qvec_to_rotmat(q))

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @classmethod
    def from_rt(cls, R, t) -> "CameraPose":
        return cls(tuple(rotmat_to_qvec(R)), tuple(np.asarray(t, dtype=float)))

    @classmethod
    def look_from(cls, center, R) -> "CameraPose":
        """Pose with camera orientation ``R`` (world-to-camera) at ``center``."""
        R = np.asarray(R, dtype=float)
        q = rotmat_to_qvec(R)
        # rebuild R from q so that t matches the stored rotation exactly
        return cls(tuple(q), tuple(-qvec_to_rotmat(q) @ np.asarray(center, dtype=float)))

    @property
    def t(self) -> np.ndarray:
        return np.array(self.tvec)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return self.qvec == other.qvec and self.tvec == other.tvec

    def __hash__(self):
        return hash((self.qvec, self.tvec))


@dataclass(frozen=True, eq=False)
class Ray3:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if not n > 0:
            raise ValueError("ray direction must be non-zero")
        if abs(n - 1.0) > 1e-12:
            d = d / n
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "direction", d)

    def at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction


def distort(x: float, y: float, k: float) -> tuple[float, float]:
    s = 1.0 + k * (x * x + y * y)
    return x * s, y * s


def undistort(xd: float, yd: float, k: float) -> tuple[float, float]:
    """Invert ``distort`` by Newton iteration on the radius."""
    rd = np.hypot(xd, yd)
    if k == 0.0 or rd == 0.0:
        return xd, yd
    r = rd
    for _ in range(UNDISTORT_ITERS):
        g = r * (1.0 + k * r * r) - rd
        dg = 1.0 + 3.0 * k * r * r
        if dg <= 0:
            raise DivergentUndistortion(f"non-invertible distortion at k*r^2={k * r * r:.3g}")
        step = g / dg
        r -= step
        if abs(step) < UNDISTORT_TOL * max(1.0, r):
            break
    if r <= 0 or 1.0 + 3.0 * k * r * r <= 0 or abs(r * (1.0 + k * r * r) - rd) > 1e-10 * max(1.0, rd):
        raise DivergentUndistortion(f"undistortion did not converge for radius {rd:.6g}")
    return xd * r / rd, yd * r / rd


def project_point(p, pose: CameraPose, intr: CameraIntrinsics) -> Optional[tuple[float, float]]:
    """Pixel coordinates of world point ``p``, or None if it is behind the camera."""
    X = pose.R @ np.asarray(p, dtype=float) + pose.t
    if X[2] <= Z_MIN:
        return None
    xd, yd = distort(X[0] / X[2], X[1] / X[2], intr.k)
    return intr.f * xd + intr.cx, intr.f * yd + intr.cy


def pixel_to_ray(u: float, v: float, pose: CameraPose, intr: CameraIntrinsics) -> Ray3:
    x, y = undistort((u - intr.cx) / intr.f, (v - intr.cy) / intr.f, intr.k)
    d = pose.R.T @ np.array([x, y, 1.0])
    return Ray3(pose.center, d / np.linalg.norm(d))
