"""Depth metrics, scale-aligned snippet ATE, trajectory accumulation."""
from __future__ import annotations

from dataclasses import astuple, dataclass, field, fields

import numpy as np

from .geometry import Pose6, invert, pose_to_transform, transform_to_pose

DEPTH_CAPS = (50.0, 80.0)
MIN_GT_DEPTH = 1e-3
ATE_SNIPPET = 5


class EvaluationError(ValueError):
    pass


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    @classmethod
    def names(cls):
        return [f.name for f in fields(cls)]

    def as_row(self):
        return list(astuple(self))


def _resize(pred, h, w):
    if pred.shape == (h, w):
        return pred
    from .autodiff import Variable, resize_bilinear

    return resize_bilinear(Variable(pred[None, None].astype(np.float64)), h, w).value[0, 0]


def depth_metrics(pred, gt, cap: float = 80.0, median_scale: bool = True, crop=None) -> DepthMetrics:
    """Standard depth errors over pixels where ``MIN_GT_DEPTH <= gt <= cap`` (``gt == 0`` is missing).

    ``crop`` is an optional ``(top, bottom, left, right)`` pixel rectangle on the gt grid.
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = _resize(np.asarray(pred, dtype=np.float64), *gt.shape)
    ok = (gt > 0) & (gt >= MIN_GT_DEPTH) & (gt <= cap)
    if crop is not None:
        t, b, l, r = crop
        box = np.zeros_like(ok)
        box[t:b, l:r] = True
        ok &= box
    if not ok.any():
        raise EvaluationError("no valid ground-truth pixels to evaluate")
    p, g = pred[ok], gt[ok]
    if median_scale:
        p = p * (np.median(g) / np.median(p))
    d = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(d) / g)),
        sq_rel=float(np.mean(d * d / g)),
        rmse=float(np.sqrt(np.mean(d * d))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
    )


def mean_depth_metrics(items) -> DepthMetrics:
    rows = np.array([m.as_row() for m in items])
    return DepthMetrics(*[float(v) for v in rows.mean(axis=0)])


# -- trajectories -----------------------------------------------------------------------

def accumulate(rel) -> list:
    """Camera-to-world trajectory from relative poses ``T_{i+1<-i}``, starting at identity."""
    out = [np.eye(4)]
    for p in rel:
        out.append(out[-1] @ invert(pose_to_transform(p)))
    return out


def relative_poses(gt_poses) -> list:
    """``T_{i+1<-i}`` pose vectors between consecutive camera-to-world poses."""
    return [transform_to_pose(invert(b) @ a) for a, b in zip(gt_poses[:-1], gt_poses[1:])]


@dataclass
class AteResult:
    mean: float
    std: float
    per_snippet: list = field(default_factory=list)
    flagged: list = field(default_factory=list)  # snippet starts whose fitted scale is 0


def _positions(rel):
    return np.array([T[:3, 3] for T in accumulate(rel)])


def snippet_ate(pred_rel, gt_poses, snippet_len: int = ATE_SNIPPET) -> AteResult:
    """Mean and std over sliding windows of the scale-aligned translation RMSE.

    ``pred_rel[i]`` is the predicted ``T_{i+1<-i}``; ``gt_poses`` are camera-to-world.
    The gt local trajectory goes through the same accumulation as the prediction.
    """
    n = len(gt_poses)
    if len(pred_rel) != n - 1:
        raise EvaluationError(f"{len(pred_rel)} relative poses for {n} frames")
    if n < snippet_len or snippet_len < 2:
        raise EvaluationError(f"need at least {snippet_len} frames, got {n}")
    gt_rel = relative_poses(gt_poses)
    per, flagged = [], []
    for s in range(n - snippet_len + 1):
        p = _positions(pred_rel[s:s + snippet_len - 1])
        g = _positions(gt_rel[s:s + snippet_len - 1])
        den = float(np.sum(p * p))
        scale = max(0.0, float(np.sum(p * g)) / den) if den > 0 else 0.0
        if scale == 0.0:
            flagged.append(s)
        r = scale * p - g
        per.append(float(np.sqrt(np.mean(np.sum(r * r, axis=1)))))
    arr = np.array(per)
    return AteResult(float(arr.mean()), float(arr.std()), per, flagged)


def identity_baseline_ate(gt_poses, snippet_len: int = ATE_SNIPPET) -> AteResult:
    return snippet_ate([Pose6(0, 0, 0, 0, 0, 0)] * (len(gt_poses) - 1), gt_poses, snippet_len)


def scale_align_positions(pred_pos, gt_pos):
    """Least-squares nonnegative scale for a whole trajectory (plotting helper)."""
    p, g = np.asarray(pred_pos), np.asarray(gt_pos)
    den = float(np.sum(p * p))
    s = max(0.0, float(np.sum(p * g)) / den) if den > 0 else 0.0
    return s * p, s
