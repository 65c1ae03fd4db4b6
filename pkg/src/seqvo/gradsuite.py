"""Registered finite-difference gradient checks, run at 64-bit."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .geometry import invert_var, mat_to_pose_vec, pose_vec_to_mat
from .warp import WarpResult, synthesize

OP_TOL = 1e-3
END2END_TOL = 1e-2
SCOPES = ("ops", "losses", "end2end")


@dataclass
class CheckResult:
    name: str
    scope: str
    error: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < self.tol


_REGISTRY: dict[str, list] = {s: [] for s in SCOPES}


def register(scope: str, name: str, tol: float | None = None):
    def deco(fn):
        _REGISTRY[scope].append((name, fn, tol if tol is not None else (END2END_TOL if scope == "end2end" else OP_TOL)))
        return fn

    return deco


def checks(scope: str):
    return list(_REGISTRY[scope])


def _u(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, shape)


# -- ops -----------------------------------------------------------------------------------

def _weighted(fn, out_shape_rng):
    """Reduce a tensor output to a scalar with fixed random weights."""
    cache = {}

    def f(*vs):
        y = fn(*vs)
        if "w" not in cache:
            cache["w"] = out_shape_rng.uniform(0.5, 1.5, y.shape)
        return (y * ad.Variable(cache["w"])).sum()

    return f


def _elementwise(kind, lo=-1.0, hi=1.0, binary=True):
    def run(rng):
        a = _u(rng, 3, 4, lo=lo, hi=hi)
        b = _u(rng, 1, 4, lo=0.5, hi=1.5)
        if binary:
            return ad.grad_check(_weighted(lambda x, y: ad.elementwise(kind, x, y), rng), [a, b])
        return ad.grad_check(_weighted(lambda x: ad.elementwise(kind, x), rng), [a])

    return run


for _k in ("add", "sub", "mul", "div"):
    register("ops", _k)(_elementwise(_k))
for _k in ("relu", "sigmoid", "tanh", "exp", "abs"):
    register("ops", _k)(_elementwise(_k, binary=False))
register("ops", "log")(_elementwise("log", lo=0.2, hi=2.0, binary=False))


@register("ops", "pow_const")
def _pow(rng):
    return ad.grad_check(_weighted(lambda x: ad.pow_const(x, 1.7), rng), [_u(rng, 5, lo=0.3, hi=2)])


@register("ops", "clip")
def _clip(rng):
    return ad.grad_check(_weighted(lambda x: ad.clip(x, -0.5, 0.5), rng), [_u(rng, 3, 5)])


@register("ops", "matmul")
def _matmul(rng):
    return ad.grad_check(_weighted(ad.matmul, rng), [_u(rng, 2, 3, 4), _u(rng, 4, 5)])


@register("ops", "reshape_transpose")
def _rt(rng):
    return ad.grad_check(_weighted(lambda x: ad.transpose(x.reshape(3, 2, 4), (2, 0, 1)), rng), [_u(rng, 6, 4)])


@register("ops", "getitem")
def _gi(rng):
    idx = np.array([0, 2, 2, 1])
    return ad.grad_check(_weighted(lambda x: x[1:, ::2] * x[idx][:3, 1:3], rng), [_u(rng, 4, 4)])


@register("ops", "concat_stack")
def _cat(rng):
    return ad.grad_check(
        _weighted(lambda a, b: ad.stack([ad.concat([a, b], axis=1), ad.concat([b, a], axis=1)], 0), rng),
        [_u(rng, 2, 3), _u(rng, 2, 3)],
    )


@register("ops", "broadcast_reduce")
def _br(rng):
    def f(x):
        y = ad.broadcast_to(ad.expand(x, 0), (3, 2, 4))
        return ad.reduce("mean", y * y, axes=(0, 2), keepdims=True) + ad.global_avg_pool(y.reshape(3, 2, 2, 2)).sum()

    return ad.grad_check(_weighted(f, rng), [_u(rng, 2, 4)])


@register("ops", "conv2d")
def _conv(rng):
    return ad.grad_check(
        _weighted(lambda x, w, b: ad.conv2d(x, w, b, stride=2, pad=1), rng),
        [_u(rng, 2, 3, 7, 6), _u(rng, 4, 3, 3, 3), _u(rng, 4)],
    )


@register("ops", "conv_transpose2d")
def _deconv(rng):
    return ad.grad_check(
        _weighted(lambda x, w, b: ad.conv_transpose2d(x, w, b, stride=2, pad=0), rng),
        [_u(rng, 2, 3, 3, 4), _u(rng, 3, 2, 2, 2), _u(rng, 2)],
    )


@register("ops", "avg_pool2d")
def _pool(rng):
    return ad.grad_check(_weighted(lambda x: ad.avg_pool2d(x, 3), rng), [_u(rng, 1, 2, 6, 7)])


@register("ops", "bilinear_sample")
def _bil(rng):
    coords = np.stack([rng.uniform(-0.7, 5.7, (2, 3, 4)), rng.uniform(-0.7, 4.7, (2, 3, 4))], axis=1)
    return ad.grad_check(_weighted(ad.bilinear_sample, rng), [_u(rng, 2, 2, 5, 6), coords])


@register("ops", "resize_bilinear")
def _resize(rng):
    return ad.grad_check(_weighted(lambda x: ad.resize_bilinear(x, 7, 9), rng), [_u(rng, 1, 2, 3, 4)])


@register("ops", "pose_vec_to_mat")
def _p2m(rng):
    return ad.grad_check(_weighted(pose_vec_to_mat, rng), [_u(rng, 3, 6, lo=-0.5, hi=0.5)])


@register("ops", "mat_to_pose_vec")
def _m2p(rng):
    p = _u(rng, 3, 6, lo=-0.5, hi=0.5)
    return ad.grad_check(_weighted(lambda q: mat_to_pose_vec(invert_var(pose_vec_to_mat(q))), rng), [p])


def _warp_inputs(rng, B=2, H=6, W=8):
    src = rng.uniform(0, 1, (B, 3, H, W))
    depth = rng.uniform(4, 6, (B, 1, H, W))
    pose = rng.uniform(-0.03, 0.03, (B, 6))
    K = np.array([[5.0, 0, (W - 1) / 2], [0, 5.0, (H - 1) / 2], [0, 0, 1]])
    return src, depth, pose, np.broadcast_to(K, (B, 3, 3)).copy()


@register("ops", "warp")
def _warp(rng):
    src, depth, pose, K = _warp_inputs(rng)
    return ad.grad_check(
        _weighted(lambda s, d, p: synthesize(s, d, pose_vec_to_mat(p), K).image, rng), [src, depth, pose]
    )


# -- losses --------------------------------------------------------------------------------

@register("losses", "photometric")
def _pho(rng):
    tgt = rng.uniform(0, 1, (2, 3, 6, 7))
    valid = (rng.uniform(size=(2, 1, 6, 7)) > 0.2).astype(np.float64)

    def f(img, mask):
        return L.photometric_masked(tgt, WarpResult(img, valid, None), mask)

    return ad.grad_check(f, [rng.uniform(0, 1, tgt.shape), rng.uniform(0.1, 0.9, (2, 1, 6, 7))])


@register("losses", "mask_regularization")
def _reg(rng):
    return ad.grad_check(L.mask_regularization, [rng.uniform(0.1, 0.9, (2, 1, 4, 5))])


@register("losses", "ssim")
def _ssim(rng):
    b = rng.uniform(0, 1, (1, 3, 12, 13))
    return ad.grad_check(lambda a: L.ssim_dissimilarity(a, b, 10), [rng.uniform(0, 1, b.shape)])


@register("losses", "appearance")
def _ap(rng):
    tgt = rng.uniform(0, 1, (2, 3, 12, 13))
    valid = (rng.uniform(size=(2, 1, 12, 13)) > 0.2).astype(np.float64)

    def f(img, mask):
        return L.appearance_loss(tgt, WarpResult(img, valid, None), mask, L.LossWeights())

    return ad.grad_check(f, [rng.uniform(0, 1, tgt.shape), rng.uniform(0.1, 0.9, (2, 1, 12, 13))])


@register("losses", "smoothness")
def _smo(rng):
    img = rng.uniform(0, 1, (2, 3, 6, 7))
    return ad.grad_check(lambda d: L.smoothness(d, img), [rng.uniform(1, 10, (2, 1, 6, 7))])


@register("losses", "trajectory_consistency")
def _tc(rng):
    n, B = 10, 2
    spans = L.TC_SPANS
    keys = [(i, s) for i in range(n - max(spans)) for s in spans]

    def f(chain, direct):
        d = {k: direct[j] for j, k in enumerate(keys)}
        return L.trajectory_consistency(d, [chain[k] for k in range(n - 1)])

    return ad.grad_check(f, [rng.uniform(-0.1, 0.1, (n - 1, B, 6)), rng.uniform(-0.3, 0.3, (len(keys), B, 6))])


@register("losses", "gan")
def _gan(rng):
    def f(r, fk):
        d, g = L.gan_losses(r, fk)
        return d + g * 0.7

    return ad.grad_check(f, [rng.uniform(0.1, 0.9, (3, 1)), rng.uniform(0.1, 0.9, (3, 1))])


@register("losses", "total")
def _total(rng):
    w = L.LossWeights()
    return ad.grad_check(lambda a, s, t, g: L.total_loss(a.sum(), s.sum(), t.sum(), g.sum(), w), [_u(rng, 1)] * 4)


# -- end to end ------------------------------------------------------------------------------

def _tiny_setup(seed: int):
    from .dataio import MotionSpec, sample_batch, synth_scene
    from .networks import NetworkConfig, SeqVONet, init_params
    from .train import TrainConfig

    net_cfg = NetworkConfig(input_h=16, input_w=24, base_channels=2, code_dim=4, lstm_hidden=4)
    # strong motion so flows (and therefore codes) are well above zero at this size
    ds = synth_scene(seed, 10, MotionSpec(forward=0.5, lateral=0.5, yaw=0.08, period=6.0), 16, 24)
    cfg = replace(TrainConfig.desk(), batch_size=1, snippet_len=9)
    batch = sample_batch(ds, cfg.batch_size, cfg.snippet_len, seed, 0)
    store = init_params(net_cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # move zero-initialised pose heads away from zero so every path carries gradient
    for k in ("gen.pose.fc_rot.w", "gen.pose.fc_trans.w"):
        store[k].value = rng.normal(0, 0.5, store[k].shape)
    # amplify the code path so its gradients sit far above finite-difference round-off
    for k in ("gen.flowenc.conv6.w", "gen.lstm.wx", "gen.lstm.proj.w", "gen.depth.dec.up6.w"):
        store[k].value = store[k].value * 4.0
    return SeqVONet(net_cfg, store), batch, cfg


def _end2end(names, seed, coords=8):
    from .networks import ParamStore, SeqVONet
    from .train import forward

    net, batch, cfg = _tiny_setup(seed)

    def f(*leaves):
        store = ParamStore(net.store.seed)
        store.params = dict(net.store.params)
        for n, v in zip(names, leaves):
            store.params[n] = v
        return forward(SeqVONet(net.cfg, store), batch, cfg).total

    with ad.precision(np.float64):
        return ad.grad_check(f, [net.store[n].value for n in names], eps=1e-5, max_coords=coords, seed=seed)


@register("end2end", "total_wrt_flow_encoder_and_lstm")
def _e2e_code(rng):
    return _end2end(["gen.flowenc.conv6.w", "gen.lstm.wx", "gen.lstm.proj.w"], int(rng.integers(1 << 16)))


@register("end2end", "total_wrt_depthnet")
def _e2e_depth(rng):
    return _end2end(["gen.depth.enc.conv1.w", "gen.depth.dec.pred1.w", "gen.depth.dec.pred4.b"], int(rng.integers(1 << 16)))


@register("end2end", "total_wrt_posemasknet")
def _e2e_pose(rng):
    return _end2end(["gen.pose.fc_rot.w", "gen.pose.fc_trans.w", "gen.pose.dec.pred1.w"], int(rng.integers(1 << 16)))


def run(scope: str, seed: int = 0, only=None, on_result: Callable | None = None) -> list:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; choose from {SCOPES}")
    out = []
    for i, (name, fn, tol) in enumerate(checks(scope)):
        if only is not None and name not in only:
            continue
        rng = np.random.default_rng([seed, i])
        t = time.perf_counter()
        with ad.precision(np.float64):
            err = float(fn(rng))
        res = CheckResult(name, scope, err, tol, time.perf_counter() - t)
        out.append(res)
        if on_result is not None:
            on_result(res)
    return out
