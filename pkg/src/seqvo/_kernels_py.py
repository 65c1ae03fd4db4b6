"""Pure numpy versions of the hot kernels.

Used when the compiled extension is unavailable or ``SEQVO_PURE_PYTHON=1``.
Signatures match ``seqvo._kernels`` exactly.
"""
import numpy as np


def im2col(x, k, stride):
    """Unfold a padded ``B x C x Hp x Wp`` array into ``B x (C*k*k) x (Ho*Wo)``."""
    B, C, Hp, Wp = x.shape
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(B, C, k, k, Ho, Wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(B, C * k * k, Ho * Wo)


def col2im(cols, shape, k, stride):
    """Adjoint of :func:`im2col`; overlapping patches are summed."""
    B, C, Hp, Wp = shape
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(B, C, k, k, Ho, Wo)
    for i in range(k):
        hi = i + stride * Ho
        for j in range(k):
            wj = j + stride * Wo
            out[:, :, i:hi:stride, j:wj:stride] += cols[:, :, i, j]
    return out


def _corners(x, y, H, W):
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx = x - x0
    wy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    return x0, y0, wx, wy


def bilinear_forward(src, x, y):
    """Sample ``src`` (B x C x H x W) at float pixel positions ``x, y`` (B x N).

    Neighbours outside the image contribute zero.  Returns B x C x N.
    """
    B, C, H, W = src.shape
    x0, y0, wx, wy = _corners(x, y, H, W)
    flat = src.reshape(B, C, H * W)
    out = np.zeros((B, C, x.shape[1]), dtype=src.dtype)
    for dy, dx, w in (
        (0, 0, (1 - wx) * (1 - wy)),
        (0, 1, wx * (1 - wy)),
        (1, 0, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = np.where(ok, yi * W + xi, 0)
        vals = np.take_along_axis(flat, idx[:, None, :].repeat(C, axis=1), axis=2)
        out += vals * (w * ok)[:, None, :].astype(src.dtype)
    return out


def bilinear_backward(src, x, y, gout, need_src=True):
    """Gradients of :func:`bilinear_forward` w.r.t. ``src``, ``x`` and ``y``."""
    B, C, H, W = src.shape
    N = x.shape[1]
    x0, y0, wx, wy = _corners(x, y, H, W)
    flat = src.reshape(B, C, H * W)
    gsrc = np.zeros((B, C, H * W), dtype=src.dtype) if need_src else None
    gx = np.zeros((B, N), dtype=src.dtype)
    gy = np.zeros((B, N), dtype=src.dtype)
    offs = np.arange(B)[:, None] * (H * W)
    for dy, dx, w, dwx, dwy in (
        (0, 0, (1 - wx) * (1 - wy), -(1 - wy), -(1 - wx)),
        (0, 1, wx * (1 - wy), (1 - wy), -wx),
        (1, 0, (1 - wx) * wy, -wy, (1 - wx)),
        (1, 1, wx * wy, wy, wx),
    ):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        idx = np.where(ok, yi * W + xi, 0)
        vals = np.take_along_axis(flat, idx[:, None, :].repeat(C, axis=1), axis=2)
        vals = vals * ok[:, None, :]
        dot = (vals * gout).sum(axis=1)
        gx += dwx * dot
        gy += dwy * dot
        if need_src:
            contrib = gout * (w * ok)[:, None, :].astype(src.dtype)
            lin = (idx + offs).ravel()
            for c in range(C):
                gsrc[:, c, :] += np.bincount(
                    lin, weights=contrib[:, c, :].ravel(), minlength=B * H * W
                ).reshape(B, H * W).astype(src.dtype)
    if need_src:
        gsrc = gsrc.reshape(B, C, H, W)
    return gsrc, gx, gy
