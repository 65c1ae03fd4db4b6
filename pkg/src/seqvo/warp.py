"""Differentiable inverse warping (view synthesis).

For each target pixel ``p`` with depth ``D(p)`` the source location is the
projection of ``T @ backproject(p, D(p))``.  The displacement is formed as
``fx * (X' Z - X Z') / (Z' Z)`` rather than by projecting and subtracting, so
an identity transform yields exactly integer source coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Variable, bilinear_sample
from .geometry import Intrinsics

MIN_Z = 1e-6
# Placeholder coordinate for invalid pixels; lies outside every image.
_OUTSIDE = -2.0

__all__ = ["WarpResult", "correspondence", "bilinear_sample", "synthesize", "rigid_flow"]


@dataclass
class WarpResult:
    image: Variable  # B x C x H x W, zero where invalid
    valid: np.ndarray  # B x 1 x H x W, {0, 1}
    coords: Variable  # B x 2 x H x W source (u, v)

    def composited(self, target) -> Variable:
        """Warped image with invalid pixels replaced by ``target``."""
        t = target.value if isinstance(target, Variable) else np.asarray(target)
        fill = (1 - self.valid) * t
        return self.image + Variable(fill.astype(self.image.dtype))


def _kmats(K, B, dtype):
    if isinstance(K, Intrinsics):
        Km = np.broadcast_to(K.matrix, (B, 3, 3))
    else:
        Km = np.broadcast_to(np.asarray(K, dtype=np.float64), (B, 3, 3))
    return Km.astype(dtype), np.linalg.inv(Km.astype(np.float64)).astype(dtype)


def correspondence(depth, T, K):
    """Source pixel coordinates and validity for every target pixel.

    ``depth`` is ``B x 1 x H x W``; ``T`` is ``B x 4 x 4`` mapping target
    camera coordinates into the source camera; ``K`` is an
    :class:`Intrinsics` or a ``B x 3 x 3`` array.  Returns ``(coords, valid)``
    with coords ``B x 2 x H x W`` (differentiable) and valid ``B x 1 x H x W``.
    """
    depth = ad.as_variable(depth)
    T = ad.as_variable(T, depth)
    B, _, H, W = depth.shape
    dt = depth.dtype
    Km, Kinv = _kmats(K, B, dt)
    v, u = np.mgrid[0:H, 0:W]
    pix = np.stack([u.ravel(), v.ravel(), np.ones(H * W)]).astype(dt)
    rays = Kinv @ pix  # B x 3 x N, z == 1
    P = Variable(rays) * depth.reshape(B, 1, H * W)
    P2 = ad.matmul(T[:, :3, :3], P) + T[:, :3, 3:]
    X, Y, Z = P[:, 0:1], P[:, 1:2], P[:, 2:3]
    X2, Y2, Z2 = P2[:, 0:1], P2[:, 1:2], P2[:, 2:3]
    den = Z2 * Z
    fx = Variable(Km[:, 0:1, 0:1])
    fy = Variable(Km[:, 1:2, 1:2])
    du = fx * (X2 * Z - X * Z2) / den
    dv = fy * (Y2 * Z - Y * Z2) / den
    uu = Variable(pix[None, 0:1]) + du
    vv = Variable(pix[None, 1:2]) + dv
    with np.errstate(invalid="ignore"):
        ok = (
            (Z2.value > MIN_Z)
            & (uu.value >= 0) & (uu.value <= W - 1)
            & (vv.value >= 0) & (vv.value <= H - 1)
            & np.isfinite(uu.value) & np.isfinite(vv.value)
        )
    okf = ok.astype(dt)
    coords = ad.concat([uu, vv], axis=1) * Variable(okf) + Variable((1 - okf) * _OUTSIDE)
    return coords.reshape(B, 2, H, W), okf.reshape(B, 1, H, W)


def synthesize(src, depth, T, K) -> WarpResult:
    """Warp ``src`` (the source view) into the target view."""
    src = ad.as_variable(src)
    coords, valid = correspondence(depth, T, K)
    img = bilinear_sample(src, coords) * Variable(valid.astype(src.dtype))
    return WarpResult(img, valid, coords)


def rigid_flow(depth, T, K):
    """Ground-truth flow of the rigid motion ``T`` for one ``H x W`` depth map.

    Each target pixel's displacement to its source location, zeroed where
    invalid.
    """
    from .flow import FlowField

    d = np.asarray(depth, dtype=np.float64)
    coords, valid = correspondence(Variable(d[None, None]), Variable(np.asarray(T, dtype=np.float64)[None]), K)
    H, W = d.shape
    grid = np.stack(np.meshgrid(np.arange(W), np.arange(H)), axis=0).astype(np.float64)
    ok = valid[0, 0] > 0
    uv = np.where(ok[None], coords.value[0] - grid, 0.0)
    return FlowField(np.ascontiguousarray(uv.transpose(1, 2, 0)), ok)
