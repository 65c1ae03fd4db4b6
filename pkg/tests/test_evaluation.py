import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seqvo.evaluation import (
    DEPTH_CAPS, DepthMetrics, EvaluationError, accumulate, depth_metrics, identity_baseline_ate,
    mean_depth_metrics, relative_poses, scale_align_positions, snippet_ate,
)
from seqvo.geometry import Pose6, compose, pose_to_transform, transform_to_pose


def naive_metrics(pred, gt, cap, median_scale):
    """Per-pixel loop written independently of the vectorised code."""
    ps, gs = [], []
    for i in range(gt.shape[0]):
        for j in range(gt.shape[1]):
            g = float(gt[i, j])
            if g > 0 and 1e-3 <= g <= cap:
                ps.append(float(pred[i, j]))
                gs.append(g)

    def median(xs):
        xs = sorted(xs)
        n = len(xs)
        return xs[n // 2] if n % 2 else 0.5 * (xs[n // 2 - 1] + xs[n // 2])

    if median_scale:
        s = median(gs) / median(ps)
        ps = [p * s for p in ps]
    n = len(gs)
    acc = dict(abs_rel=0.0, sq_rel=0.0, se=0.0, sl=0.0, d1=0, d2=0, d3=0)
    for p, g in zip(ps, gs):
        acc["abs_rel"] += abs(p - g) / g
        acc["sq_rel"] += (p - g) ** 2 / g
        acc["se"] += (p - g) ** 2
        acc["sl"] += (math.log(p) - math.log(g)) ** 2
        r = max(p / g, g / p)
        acc["d1"] += r < 1.25
        acc["d2"] += r < 1.25**2
        acc["d3"] += r < 1.25**3
    return [acc["abs_rel"] / n, acc["sq_rel"] / n, math.sqrt(acc["se"] / n), math.sqrt(acc["sl"] / n),
            acc["d1"] / n, acc["d2"] / n, acc["d3"] / n]


@pytest.mark.parametrize("median_scale", [True, False])
def test_depth_metrics_match_naive_loop(median_scale):
    rng = np.random.default_rng(0)
    for k in range(100):
        gt = rng.uniform(0.5, 100, (16, 16))
        gt[rng.uniform(size=gt.shape) < 0.2] = 0
        pred = gt * rng.uniform(0.6, 1.6, gt.shape) + 0.1
        cap = DEPTH_CAPS[k % 2]
        got = depth_metrics(pred, gt, cap, median_scale).as_row()
        want = naive_metrics(pred, gt, cap, median_scale)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_perfect_prediction():
    gt = np.random.default_rng(1).uniform(1, 50, (8, 8))
    m = depth_metrics(gt, gt)
    assert m.abs_rel == m.sq_rel == m.rmse == m.rmse_log == 0
    assert m.delta1 == m.delta2 == m.delta3 == 1


def test_uniform_overestimate_example():
    gt = np.random.default_rng(2).uniform(1, 50, (8, 8))
    m = depth_metrics(1.3 * gt, gt, median_scale=False)
    assert m.abs_rel == pytest.approx(0.3, abs=1e-12)
    assert m.delta1 == 0 and m.delta2 == 1
    m = depth_metrics(1.3 * gt, gt, median_scale=True)
    assert m.abs_rel < 1e-12


def test_median_scaling_removes_global_scale():
    rng = np.random.default_rng(3)
    gt = rng.uniform(1, 70, (10, 10))
    pred = gt * rng.uniform(0.8, 1.2, gt.shape)
    a = depth_metrics(pred, gt).as_row()
    b = depth_metrics(pred * 17.0, gt).as_row()
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


def test_noise_ladder_monotone():
    rng = np.random.default_rng(4)
    gt = rng.uniform(1, 70, (32, 32))
    noise = rng.normal(size=gt.shape)
    rows = [depth_metrics(gt * np.exp(s * noise), gt, median_scale=False) for s in (0.0, 0.05, 0.1, 0.2, 0.4)]
    for a, b in zip(rows, rows[1:]):
        assert b.abs_rel > a.abs_rel and b.rmse > a.rmse and b.rmse_log > a.rmse_log
        assert b.delta1 <= a.delta1


def test_cap_and_missing_pixels():
    gt = np.array([[0.0, 10.0], [60.0, 90.0]])
    pred = np.array([[5.0, 10.0], [30.0, 1.0]])
    assert depth_metrics(pred, gt, cap=50, median_scale=False).abs_rel == 0
    m = depth_metrics(pred, gt, cap=80, median_scale=False)
    assert m.abs_rel == pytest.approx(0.25)
    with pytest.raises(EvaluationError):
        depth_metrics(pred, np.zeros((2, 2)))


def test_crop_and_resize():
    gt = np.full((8, 8), 5.0)
    gt[:4] = 20.0
    pred = np.full((8, 8), 5.0)
    assert depth_metrics(pred, gt, median_scale=False, crop=(4, 8, 0, 8)).abs_rel == 0
    small = np.full((4, 4), 5.0)
    assert depth_metrics(small, np.full((8, 8), 5.0), median_scale=False).abs_rel == pytest.approx(0, abs=1e-12)


def test_mean_depth_metrics():
    a = DepthMetrics(1, 2, 3, 4, 0.5, 0.5, 1)
    b = DepthMetrics(3, 4, 5, 6, 1, 1, 1)
    assert mean_depth_metrics([a, b]).as_row() == [2, 3, 4, 5, 0.75, 0.75, 1]
    assert DepthMetrics.names()[0] == "abs_rel"


def test_accumulate_examples():
    assert np.array_equal(accumulate([])[0], np.eye(4))
    fwd = Pose6(0, 0, 0, 0, 0, -1.0)  # T_{t<-t-1} for a camera moving +1 along z
    traj = accumulate([fwd] * 3)
    np.testing.assert_allclose([T[:3, 3] for T in traj], [[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]], atol=1e-15)


def _random_traj(rng, n):
    poses = [np.eye(4)]
    for _ in range(n - 1):
        step = pose_to_transform(np.concatenate([rng.uniform(-0.05, 0.05, 3), rng.uniform(-0.5, 0.5, 3)]))
        poses.append(compose(poses[-1], step))
    return poses


def test_relative_accumulate_round_trip():
    gt = _random_traj(np.random.default_rng(5), 12)
    back = accumulate(relative_poses(gt))
    for a, b in zip(gt, back):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_ate_zero_on_gt():
    gt = _random_traj(np.random.default_rng(6), 20)
    r = snippet_ate(relative_poses(gt), gt)
    assert r.mean == 0 and r.std == 0
    assert len(r.per_snippet) == 16 and r.flagged == []


@pytest.mark.parametrize("scale", [0.25, 0.5, 2.0, 8.0])
def test_ate_exact_scale_invariance(scale):
    rng = np.random.default_rng(7)
    gt = _random_traj(rng, 15)
    pred = [np.concatenate([p[:3], p[3:] + rng.normal(0, 0.05, 3)]) for p in map(np.asarray, relative_poses(gt))]
    scaled = [np.concatenate([p[:3], scale * p[3:]]) for p in pred]
    a, b = snippet_ate(pred, gt), snippet_ate(scaled, gt)
    assert a.mean == b.mean and a.std == b.std


def test_ate_scale_invariance_non_dyadic():
    rng = np.random.default_rng(8)
    gt = _random_traj(rng, 15)
    pred = [np.concatenate([p[:3], p[3:] + rng.normal(0, 0.05, 3)]) for p in map(np.asarray, relative_poses(gt))]
    scaled = [np.concatenate([p[:3], 0.37 * p[3:]]) for p in pred]
    assert abs(snippet_ate(pred, gt).mean - snippet_ate(scaled, gt).mean) < 1e-12


def brute_force_scale_rmse(p, g):
    ss = np.linspace(0, 3, 30001)
    errs = [np.sqrt(np.mean(np.sum((s * p - g) ** 2, axis=1))) for s in ss]
    return min(errs)


def test_ate_offset_against_brute_force():
    # gt moves 1 m forward per frame; prediction has an extra 0.1 m lateral offset per step
    gt = [pose_to_transform((0, 0, 0, 0, 0, float(i))) for i in range(5)]
    pred = [Pose6(0, 0, 0, -0.1, 0, -1.0)] * 4
    r = snippet_ate(pred, gt)
    p = np.array([[0.1 * i, 0, i] for i in range(5)])
    g = np.array([[0, 0, i] for i in range(5)], dtype=float)
    assert len(r.per_snippet) == 1
    assert r.mean == pytest.approx(brute_force_scale_rmse(p, g), abs=1e-6)
    s = (p * g).sum() / (p * p).sum()
    assert r.mean == pytest.approx(np.sqrt(np.mean(np.sum((s * p - g) ** 2, axis=1))), rel=1e-12)


def test_ate_flags_zero_scale():
    gt = [pose_to_transform((0, 0, 0, 0, 0, float(i))) for i in range(5)]
    r = snippet_ate([Pose6(0, 0, 0, 0, 0, 1.0)] * 4, gt)
    assert r.flagged == [0]
    assert r.mean == pytest.approx(np.sqrt(np.mean([i * i for i in range(5)])))


def test_identity_baseline_equals_gt_rms():
    gt = [pose_to_transform((0, 0, 0, 0, 0, float(i))) for i in range(6)]
    r = identity_baseline_ate(gt)
    assert r.mean == pytest.approx(np.sqrt(np.mean([i * i for i in range(5)])))
    assert len(r.flagged) == 2


def test_ate_errors():
    gt = [np.eye(4)] * 6
    with pytest.raises(EvaluationError):
        snippet_ate([Pose6(0, 0, 0, 0, 0, 0)] * 4, gt)
    with pytest.raises(EvaluationError):
        snippet_ate([Pose6(0, 0, 0, 0, 0, 0)] * 2, gt[:3])


def test_scale_align_positions():
    g = np.random.default_rng(9).normal(size=(7, 3))
    out, s = scale_align_positions(g / 4, g)
    assert s == pytest.approx(4)
    np.testing.assert_allclose(out, g, atol=1e-12)
    assert scale_align_positions(-g, g)[1] == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_well_formed(seed):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0.01, 90, (6, 6))
    pred = rng.uniform(0.1, 100, (6, 6))
    m = depth_metrics(pred, gt)
    assert min(m.abs_rel, m.sq_rel, m.rmse, m.rmse_log) >= 0
    assert 0 <= m.delta1 <= m.delta2 <= m.delta3 <= 1
