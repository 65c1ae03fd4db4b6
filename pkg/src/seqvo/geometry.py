"""Rigid transforms, Euler parameterization and the pinhole camera.

Conventions used throughout the package:

* ``R = Rz(rz) @ Ry(ry) @ Rx(rx)`` (extrinsic x, then y, then z).
* A pose vector is ordered ``(rx, ry, rz, tx, ty, tz)``.
* The pose network predicts ``T_t<-t-1``: it maps frame ``t-1`` camera
  coordinates into frame ``t``.  Inverse warping of frame ``t-1`` into frame
  ``t`` consumes the inverse of that transform.
* Pixel ``(u, v)`` is (column, row) with integer pixel centres.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Variable


class GimbalLockError(ValueError):
    pass


class Pose6(NamedTuple):
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Pose6":
        return cls(*(float(v) for v in np.asarray(a).ravel()[:6]))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width is not None and not 0 <= self.cx < self.width:
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if self.height is not None and not 0 <= self.cy < self.height:
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1]], dtype=np.float64)

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [[1 / self.fx, 0, -self.cx / self.fx], [0, 1 / self.fy, -self.cy / self.fy], [0, 0, 1]],
            dtype=np.float64,
        )

    def with_size(self, width: int, height: int) -> "Intrinsics":
        return replace(self, width=width, height=height)

    def resized(self, width: int, height: int) -> "Intrinsics":
        """Intrinsics after resizing the image to ``width x height``.

        Uses the half-pixel-centre mapping of :func:`autodiff.resize_bilinear`.
        """
        if self.width is None or self.height is None:
            raise ValueError("resizing needs the original image size")
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        )


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def pose_to_transform(p) -> np.ndarray:
    p = Pose6(*p)
    T = np.eye(4)
    T[:3, :3] = rot_z(p.rz) @ rot_y(p.ry) @ rot_x(p.rx)
    T[:3, 3] = (p.tx, p.ty, p.tz)
    return T


def transform_to_pose(T, tol: float = 1e-6) -> Pose6:
    R = np.asarray(T)[:3, :3]
    ry = math.atan2(-R[2, 0], math.hypot(R[2, 1], R[2, 2]))
    if math.pi / 2 - abs(ry) < tol:
        raise GimbalLockError(f"ry={ry:.12f} is within {tol} of +-pi/2; rx and rz are not separable")
    rx = math.atan2(R[2, 1], R[2, 2])
    rz = math.atan2(R[1, 0], R[0, 0])
    t = np.asarray(T)[:3, 3]
    return Pose6(rx, ry, rz, float(t[0]), float(t[1]), float(t[2]))


def compose(a, b) -> np.ndarray:
    return np.asarray(a) @ np.asarray(b)


def invert(T) -> np.ndarray:
    T = np.asarray(T)
    R = T[:3, :3]
    out = np.eye(4)
    out[:3, :3] = R.T
    out[:3, 3] = -R.T @ T[:3, 3]
    return out


def is_rigid(T, tol: float = 1e-6) -> bool:
    T = np.asarray(T)
    if T.shape != (4, 4) or not np.all(np.isfinite(T)):
        return False
    R = T[:3, :3]
    return (
        np.allclose(R.T @ R, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1) < tol
        and np.allclose(T[3], [0, 0, 0, 1], atol=tol)
    )


def backproject(p, d, K: Intrinsics) -> np.ndarray:
    """Pixel ``(u, v)`` at depth ``d`` to a camera-frame 3-D point."""
    u, v = p
    return np.array([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d], dtype=np.float64)


def project(P, K: Intrinsics):
    """Camera-frame point to pixel; ``None`` when the point is not in front."""
    X, Y, Z = P
    if Z <= 0:
        return None
    return np.array([K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy], dtype=np.float64)


def pixel_grid(height: int, width: int) -> np.ndarray:
    """``H x W x 2`` array whose entry ``(r, c)`` is ``(c, r)``."""
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u, v], axis=-1).astype(np.float64)


# -- differentiable, batched versions ------------------------------------------

def _euler_mats(rx, ry, rz):
    """Rotation matrices and their partial derivatives, all ``B x 3 x 3``."""
    B = rx.shape[0]
    z, o = np.zeros(B), np.ones(B)
    cx, sx, cy, sy, cz, sz = np.cos(rx), np.sin(rx), np.cos(ry), np.sin(ry), np.cos(rz), np.sin(rz)

    def m(*rows):
        return np.stack([np.stack(r, -1) for r in rows], -2)

    Rx = m((o, z, z), (z, cx, -sx), (z, sx, cx))
    Ry = m((cy, z, sy), (z, o, z), (-sy, z, cy))
    Rz = m((cz, -sz, z), (sz, cz, z), (z, z, o))
    dRx = m((z, z, z), (z, -sx, -cx), (z, cx, -sx))
    dRy = m((-sy, z, cy), (z, z, z), (-cy, z, -sy))
    dRz = m((-sz, -cz, z), (cz, -sz, z), (z, z, z))
    return Rx, Ry, Rz, dRx, dRy, dRz


def pose_vec_to_mat(p: Variable) -> Variable:
    """``B x 6`` pose vectors to ``B x 4 x 4`` transforms."""
    v = p.value.astype(np.float64)
    Rx, Ry, Rz, dRx, dRy, dRz = _euler_mats(v[:, 0], v[:, 1], v[:, 2])
    B = v.shape[0]
    out = np.zeros((B, 4, 4))
    out[:, :3, :3] = Rz @ Ry @ Rx
    out[:, :3, 3] = v[:, 3:]
    out[:, 3, 3] = 1
    partials = (Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx)

    def backward(g):
        g = g.astype(np.float64)
        gr = g[:, :3, :3]
        grad = np.empty((B, 6))
        for i, d in enumerate(partials):
            grad[:, i] = (gr * d).sum(axis=(1, 2))
        grad[:, 3:] = g[:, :3, 3]
        return (grad.astype(p.dtype),)

    return Variable._from_op(out.astype(p.dtype), (p,), backward)


def _atan2_grads(y, x):
    r2 = x * x + y * y
    return x / r2, -y / r2  # d/dy, d/dx


def mat_to_pose_vec(T: Variable) -> Variable:
    """``B x 4 x 4`` transforms to ``B x 6`` pose vectors (no gimbal check)."""
    M = T.value.astype(np.float64)
    R = M[:, :3, :3]
    h = np.hypot(R[:, 2, 1], R[:, 2, 2])
    rx = np.arctan2(R[:, 2, 1], R[:, 2, 2])
    ry = np.arctan2(-R[:, 2, 0], h)
    rz = np.arctan2(R[:, 1, 0], R[:, 0, 0])
    out = np.concatenate([np.stack([rx, ry, rz], -1), M[:, :3, 3]], axis=1)

    def backward(g):
        g = g.astype(np.float64)
        G = np.zeros_like(M)
        dy, dx = _atan2_grads(R[:, 2, 1], R[:, 2, 2])
        G[:, 2, 1] += g[:, 0] * dy
        G[:, 2, 2] += g[:, 0] * dx
        dy, dx = _atan2_grads(-R[:, 2, 0], h)
        G[:, 2, 0] += -g[:, 1] * dy
        hs = np.where(h > 0, h, 1.0)
        G[:, 2, 1] += g[:, 1] * dx * R[:, 2, 1] / hs
        G[:, 2, 2] += g[:, 1] * dx * R[:, 2, 2] / hs
        dy, dx = _atan2_grads(R[:, 1, 0], R[:, 0, 0])
        G[:, 1, 0] += g[:, 2] * dy
        G[:, 0, 0] += g[:, 2] * dx
        G[:, :3, 3] = g[:, 3:]
        return (G.astype(T.dtype),)

    return Variable._from_op(out.astype(T.dtype), (T,), backward)


def invert_var(T: Variable) -> Variable:
    """Rigid inverse of ``B x 4 x 4`` transforms."""
    B = T.shape[0]
    Rt = ad.transpose(T[:, :3, :3], (0, 2, 1))
    t = T[:, :3, 3:]
    top = ad.concat([Rt, -ad.matmul(Rt, t)], axis=2)
    bottom = np.zeros((B, 1, 4), dtype=T.dtype)
    bottom[:, 0, 3] = 1
    return ad.concat([top, Variable(bottom)], axis=1)
