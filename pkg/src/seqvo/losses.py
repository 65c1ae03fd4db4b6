"""Training objectives: appearance, smoothness, trajectory consistency, GAN."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .geometry import mat_to_pose_vec, pose_vec_to_mat

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
TC_SPANS = (2, 4, 8)
PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_a: float = 0.75
    lambda_s: float = 0.1
    lambda_t: float = 0.14
    lambda_g: float = 0.01
    alpha: float = 0.85
    ssim_window: int = 10

    def __post_init__(self):
        for name in ("lambda_a", "lambda_s", "lambda_t", "lambda_g"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.ssim_window < 1:
            raise ValueError("ssim_window must be positive")


@dataclass
class LossReport:
    pho: float = 0.0
    reg: float = 0.0
    ssim: float = 0.0
    ap: float = 0.0
    smo: float = 0.0
    tc: float = 0.0
    g_adv: float = 0.0
    d_adv: float = 0.0
    total: float = 0.0

    COLUMNS = ("pho", "reg", "ssim", "ap", "smo", "tc", "g_adv", "d_adv", "total")

    def as_dict(self):
        return asdict(self)

    def finite(self):
        """Name of the first non-finite term, or ``None``."""
        for f in fields(self):
            if not np.isfinite(getattr(self, f.name)):
                return f.name
        return None


class TrainingLog:
    """Per-step CSV log of loss reports."""

    HEADER = ("step",) + LossReport.COLUMNS

    def __init__(self, path, append: bool = False):
        self._fh = open(path, "a" if append else "w", newline="")
        self._w = csv.writer(self._fh)
        if not append:
            self._w.writerow(self.HEADER)

    def write(self, step: int, report: LossReport):
        self._w.writerow([step] + [repr(float(getattr(report, c))) for c in LossReport.COLUMNS])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _var(x, like=None):
    return ad.as_variable(x, like)


def photometric_masked(target, warped, mask) -> Variable:
    """Mask- and validity-weighted L1 error, channels summed, normalised by the weight."""
    target = _var(target)
    img = warped.image
    w = _var(mask, img) * Variable(warped.valid.astype(img.dtype))
    err = ad.abs(img - target).sum(axis=1, keepdims=True)
    return (err * w).sum() / (w.sum() + 1e-8)


def mask_regularization(mask) -> Variable:
    """Cross-entropy of the mask against an all-ones label."""
    return -ad.log(_var(mask) + 1e-12).mean()


def ssim(a, b, window: int = 10) -> Variable:
    """Per-channel SSIM map with a uniform ``window x window`` box, no padding."""
    a, b = _var(a), _var(b)
    mu_a = ad.avg_pool2d(a, window)
    mu_b = ad.avg_pool2d(b, window)
    saa = ad.avg_pool2d(a * a, window) - mu_a * mu_a
    sbb = ad.avg_pool2d(b * b, window) - mu_b * mu_b
    sab = ad.avg_pool2d(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (saa + sbb + SSIM_C2)
    return num / den


def ssim_dissimilarity(a, b, window: int = 10) -> Variable:
    return ((1 - ssim(a, b, window)) * 0.5).mean()


def appearance_terms(target, warped, mask, weights: LossWeights):
    """``(ap, pho, reg, ssim_term)``; the SSIM term uses invalid pixels filled from target."""
    pho = photometric_masked(target, warped, mask)
    reg = mask_regularization(mask)
    sim = ssim_dissimilarity(warped.composited(target), target, weights.ssim_window)
    ap = reg + (1 - weights.alpha) * pho + weights.alpha * sim
    return ap, pho, reg, sim


def appearance_loss(target, warped, mask, weights: LossWeights) -> Variable:
    return appearance_terms(target, warped, mask, weights)[0]


def smoothness(depth, image) -> Variable:
    """Edge-aware first-order smoothness of mean-normalised depth."""
    depth, image = _var(depth), _var(image, depth)
    d = depth / depth.mean(axis=(1, 2, 3), keepdims=True)
    img = image.value
    ex = np.exp(-np.abs(img[..., :, 1:] - img[..., :, :-1]).sum(axis=1, keepdims=True))
    ey = np.exp(-np.abs(img[..., 1:, :] - img[..., :-1, :]).sum(axis=1, keepdims=True))
    dx = ad.abs(d[..., :, 1:] - d[..., :, :-1]) * Variable(ex.astype(d.dtype))
    dy = ad.abs(d[..., 1:, :] - d[..., :-1, :]) * Variable(ey.astype(d.dtype))
    return dx.mean() + dy.mean()


def compose_chain(steps) -> Variable:
    """Compose one-step transforms ``[T_1<-0, T_2<-1, ...]`` into ``T_n<-0``."""
    out = steps[0]
    for T in steps[1:]:
        out = ad.matmul(T, out)
    return out


def trajectory_consistency(direct, chain, spans=TC_SPANS) -> Variable:
    """L1 gap between directly estimated span poses and composed one-step poses.

    ``chain`` is a ``(L-1) x B x 6`` Variable (or list of ``B x 6``) of one-step
    poses ``p[k] = T_{k+1<-k}``.  ``direct`` maps ``(i, span)`` to the ``B x 6``
    pose ``T_{i+span<-i}`` for every start ``i`` with ``i + max(spans) <= L-1``.
    """
    steps = list(chain) if isinstance(chain, (list, tuple)) else [chain[k] for k in range(chain.shape[0])]
    n_frames = len(steps) + 1
    if n_frames < max(spans) + 1:
        raise ValueError(f"trajectory consistency needs >= {max(spans) + 1} frames, got {n_frames}")
    mats = [pose_vec_to_mat(_var(p)) for p in steps]
    starts = range(n_frames - max(spans))
    total = None
    for i in starts:
        for t in spans:
            composed = mat_to_pose_vec(compose_chain(mats[i:i + t]))
            term = ad.abs(_var(direct[(i, t)]) - composed).sum(axis=1).mean()
            total = term if total is None else total + term
    return total / len(starts)


def gan_losses(d_real, d_fake):
    """``(d_loss, g_loss)``; generator uses the non-saturating ``-log D(fake)``."""
    d_real = ad.clip(_var(d_real), PROB_EPS, 1 - PROB_EPS)
    d_fake = ad.clip(_var(d_fake), PROB_EPS, 1 - PROB_EPS)
    d_loss = -(ad.log(d_real) + ad.log(1 - d_fake)).mean()
    g_loss = -ad.log(d_fake).mean()
    return d_loss, g_loss


def generator_gan_loss(d_fake) -> Variable:
    return -ad.log(ad.clip(_var(d_fake), PROB_EPS, 1 - PROB_EPS)).mean()


def discriminator_loss(d_real, d_fake) -> Variable:
    return gan_losses(d_real, d_fake)[0]


def total_loss(ap, smo, tc, g_adv, weights: LossWeights):
    """Weighted sum of the four terms; accepts floats or Variables."""
    terms = []
    for lam, v in ((weights.lambda_a, ap), (weights.lambda_s, smo), (weights.lambda_t, tc), (weights.lambda_g, g_adv)):
        if lam == 0 or v is None:
            continue
        terms.append(v * lam)
    if not terms:
        return 0.0
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def _f(v):
    if v is None:
        return 0.0
    return float(v.value) if isinstance(v, Variable) else float(v)


def make_report(pho, reg, sim, ap, smo, tc, g_adv, d_adv, weights: LossWeights) -> LossReport:
    vals = dict(pho=_f(pho), reg=_f(reg), ssim=_f(sim), ap=_f(ap), smo=_f(smo), tc=_f(tc), g_adv=_f(g_adv), d_adv=_f(d_adv))
    vals["total"] = (
        weights.lambda_a * vals["ap"] + weights.lambda_s * vals["smo"]
        + weights.lambda_t * vals["tc"] + weights.lambda_g * vals["g_adv"]
    )
    return LossReport(**vals)
