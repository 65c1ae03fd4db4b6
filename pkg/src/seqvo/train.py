"""Training: snippet unrolling, losses, alternating generator/discriminator updates."""
from __future__ import annotations

import logging
import queue
import threading
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Variable
from .dataio import AugmentSpec, SequenceDataset, augment, make_snippet, sample_batch
from .geometry import invert_var, pose_vec_to_mat
from .networks import (
    NetworkConfig,
    ParamStore,
    SeqVONet,
    config_from_dict,
    init_params,
    load_checkpoint,
    rgbd,
    save_checkpoint,
)
from .warp import synthesize

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    snippet_len: int = 15
    iterations: int = 100_000
    lr0: float = 1e-4
    lr_halve_every: int = 15_000
    weight_decay: float = 3e-4
    seed: int = 0
    d_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    use_code: bool = True
    use_lstm: bool = True
    augment: bool = True
    ckpt_every: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)

    def __post_init__(self):
        if self.weights.lambda_t > 0 and self.snippet_len < max(L.TC_SPANS) + 1:
            raise ValueError(
                f"trajectory consistency needs snippet_len >= {max(L.TC_SPANS) + 1}, got {self.snippet_len}"
            )
        if self.snippet_len < 2 or self.batch_size < 1:
            raise ValueError("snippet_len >= 2 and batch_size >= 1 required")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        base = dict(batch_size=2, snippet_len=9, iterations=500, lr0=3e-3, lr_halve_every=200, weight_decay=3e-4)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        w = d.pop("weights", None)
        out = config_from_dict(cls, d)
        if w is not None:
            out = replace(out, weights=L.LossWeights(**w))
        return out


# -- optimisers -------------------------------------------------------------------------

@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0  # Adam steps taken
    step: int = 0  # training steps completed


def _check_grad(name, g):
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite gradient for parameter {name}")


def adam_step(params, state: OptimState, lr: float, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8) -> None:
    """Bias-corrected Adam with decoupled weight decay; updates ``params`` in place."""
    live = [p for p in params if p.grad is not None]
    for p in live:
        _check_grad(p.name, p.grad)
    state.t += 1
    c1 = 1 - beta1**state.t
    c2 = 1 - beta2**state.t
    for p in live:
        g = p.grad
        dt = p.value.dtype
        theta = p.value
        if weight_decay:
            theta = theta - dt.type(lr * weight_decay) * theta
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = dt.type(beta1) * m + dt.type(1 - beta1) * g
        v = dt.type(beta2) * v + dt.type(1 - beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        mhat = m / dt.type(c1)
        vhat = v / dt.type(c2)
        p.value = (theta - dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(eps))).astype(dt)


def sgd_step(params, lr: float) -> None:
    """Plain gradient descent; updates ``params`` in place."""
    live = [p for p in params if p.grad is not None]
    for p in live:
        _check_grad(p.name, p.grad)
    for p in live:
        p.value = (p.value - p.value.dtype.type(lr) * p.grad).astype(p.value.dtype)


def lr_at(step: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * 0.5 ** (step // cfg.lr_halve_every)


# -- forward pass ------------------------------------------------------------------------

@dataclass
class ForwardResult:
    report_terms: dict
    total: Variable | float
    fake: Variable | None  # composited warped targets, finest scale
    targets: np.ndarray | None
    depths: list  # finest-scale depth, per frame (L*B x 1 x H x W)
    poses: Variable  # one-step poses, (L-1)*B x 6


def _stack_frames(batch):
    """(L, B, ...) arrays from a list of snippets."""
    imgs = np.stack([sn.images for sn in batch], axis=1)
    flows = np.stack([sn.flows for sn in batch], axis=1)
    Ks = np.stack([np.asarray(sn.K, dtype=np.float64) for sn in batch])
    return imgs, flows, Ks


def refined_codes(net: SeqVONet, flows, cfg: TrainConfig, dtype):
    """Codes for every frame: (L*B) x code_dim.  Frame 0 sees zero flow."""
    n_steps, B = flows.shape[:2]
    Lf = n_steps + 1
    if not cfg.use_code:
        return Variable(np.zeros((Lf * B, net.cfg.code_dim), dtype))
    all_flows = np.concatenate([np.zeros((1,) + flows.shape[1:], flows.dtype), flows]).astype(dtype)
    codes = net.encoder_forward(all_flows.reshape((Lf * B,) + flows.shape[2:]))
    if not cfg.use_lstm:
        return codes
    state = net.initial_state(B, dtype)
    out = []
    for t in range(Lf):
        r, state = net.lstm_step(codes[t * B:(t + 1) * B], state)
        out.append(r)
    return ad.concat(out, axis=0)


def forward(net: SeqVONet, batch, cfg: TrainConfig) -> ForwardResult:
    w = cfg.weights
    dtype = net.store["gen.lstm.b"].dtype
    imgs, flows, Ks = _stack_frames(batch)
    Lf, B, C, H, W = imgs.shape
    imgs = imgs.astype(dtype)
    flat_imgs = imgs.reshape(Lf * B, C, H, W)

    codes = refined_codes(net, flows, cfg, dtype)
    depth_scales = net.depthnet_forward(flat_imgs, codes)
    depth_full = [ad.resize_bilinear(d, H, W) for d in depth_scales]
    finest = depth_full[-1]

    def rows(t):
        return slice(t * B, (t + 1) * B)

    frames_rgbd = rgbd(flat_imgs, finest)
    pairs = [(t - 1, t) for t in range(1, Lf)]
    use_tc = w.lambda_t > 0
    span_pairs = []
    if use_tc:
        for i in range(Lf - max(L.TC_SPANS)):
            span_pairs += [(i, i + s) for s in L.TC_SPANS]
    all_pairs = pairs + span_pairs
    idx_a = np.concatenate([np.arange(a * B, (a + 1) * B) for a, _ in all_pairs])
    idx_b = np.concatenate([np.arange(b * B, (b + 1) * B) for _, b in all_pairs])
    pose_all, masks_all = net.posemask_forward(frames_rgbd[idx_a], frames_rgbd[idx_b])
    n1 = len(pairs) * B
    poses = pose_all[:n1]

    # inverse warp frame t-1 into frame t at every scale
    src_idx = idx_a[:n1]
    tgt_idx = idx_b[:n1]
    src = flat_imgs[src_idx]
    tgt = flat_imgs[tgt_idx]
    K_pairs = np.tile(Ks, (len(pairs), 1, 1))
    T_src_from_tgt = invert_var(pose_vec_to_mat(poses))
    ap = pho = reg = sim = None
    fake = None
    for s in range(4):
        mask = ad.resize_bilinear(masks_all[s][:n1], H, W)
        warped = synthesize(Variable(src), depth_full[s][tgt_idx], T_src_from_tgt, K_pairs)
        a, p, r, q = L.appearance_terms(tgt, warped, mask, w)
        ap = a if ap is None else ap + a
        pho = p if pho is None else pho + p
        reg = r if reg is None else reg + r
        sim = q if sim is None else sim + q
        if s == 3:
            fake = warped.composited(tgt)
    ap, pho, reg, sim = ap * 0.25, pho * 0.25, reg * 0.25, sim * 0.25

    smo = None
    for s in range(4):
        term = L.smoothness(depth_full[s], flat_imgs)
        smo = term if smo is None else smo + term
    smo = smo * 0.25

    tc = None
    if use_tc:
        chain = [poses[rows(k)] for k in range(Lf - 1)]
        direct = {}
        for j, (i, k) in enumerate(span_pairs):
            direct[(i, k - i)] = pose_all[n1 + j * B:n1 + (j + 1) * B]
        tc = L.trajectory_consistency(direct, chain)

    g_adv = None
    if w.lambda_g > 0:
        g_adv = L.generator_gan_loss(net.discriminator_forward(fake, tgt))

    total = L.total_loss(ap, smo, tc, g_adv, w)
    terms = dict(pho=pho, reg=reg, sim=sim, ap=ap, smo=smo, tc=tc, g_adv=g_adv)
    return ForwardResult(terms, total, fake, tgt, [finest[rows(t)] for t in range(Lf)], poses)


def train_step(net: SeqVONet, batch, optim: OptimState, cfg: TrainConfig, step: int | None = None) -> L.LossReport:
    """One generator update (Adam) followed by one discriminator update (SGD)."""
    step = optim.step if step is None else step
    store = net.store
    res = forward(net, batch, cfg)
    provisional = L.make_report(d_adv=0.0, weights=cfg.weights, **res.report_terms)
    bad = provisional.finite()
    if bad is not None:
        raise NumericalError(f"non-finite loss term {bad} at step {step}")
    store.zero_grad()
    res.total.backward()
    adam_step(store.group("gen."), optim, lr_at(step, cfg), cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)

    d_adv = 0.0
    if cfg.weights.lambda_g > 0:
        fake = res.fake.detach()
        tgt = Variable(res.targets)
        d_real = net.discriminator_forward(tgt, tgt)
        d_fake = net.discriminator_forward(fake, tgt)
        d_loss = L.discriminator_loss(d_real, d_fake)
        d_adv = float(d_loss.value)
        if not np.isfinite(d_adv):
            raise NumericalError(f"non-finite loss term d_adv at step {step}")
        store.zero_grad()
        d_loss.backward()
        sgd_step(store.group("disc."), cfg.d_lr)
    optim.step = step + 1
    return L.make_report(d_adv=d_adv, weights=cfg.weights, **res.report_terms)


# -- checkpoints ---------------------------------------------------------------------------

def checkpoint_save(path, net: SeqVONet, optim: OptimState, step: int, cfg: TrainConfig) -> None:
    arrays = {f"param/{k}": v.value for k, v in net.store.items()}
    for k, v in optim.m.items():
        arrays[f"adam_m/{k}"] = v
    for k, v in optim.v.items():
        arrays[f"adam_v/{k}"] = v
    header = {
        "format": "seqvo-checkpoint",
        "network": asdict(net.cfg),
        "train": cfg.to_dict(),
        "seed": net.store.seed,
        "step": int(step),
        "adam_t": int(optim.t),
    }
    save_checkpoint(path, arrays, header)


def checkpoint_load(path):
    """Returns ``(net, optim, step, train_config)``."""
    arrays, header = load_checkpoint(path)
    net_cfg = config_from_dict(NetworkConfig, header["network"])
    store = ParamStore(header["seed"])
    optim = OptimState(t=header["adam_t"], step=header["step"])
    for k, a in arrays.items():
        kind, _, name = k.partition("/")
        if kind == "param":
            store.add(name, a)
        elif kind == "adam_m":
            optim.m[name] = a
        elif kind == "adam_v":
            optim.v[name] = a
    return SeqVONet(net_cfg, store), optim, header["step"], TrainConfig.from_dict(header["train"])


# -- loop -------------------------------------------------------------------------------------

def batch_for_step(ds: SequenceDataset, cfg: TrainConfig, net_cfg: NetworkConfig, step: int,
                   aug_spec: AugmentSpec = AugmentSpec()):
    batch = sample_batch(ds, cfg.batch_size, cfg.snippet_len, cfg.seed, step, (net_cfg.input_h, net_cfg.input_w))
    if cfg.augment:
        aug_seed = int(np.random.SeedSequence([cfg.seed, step, 1]).generate_state(1)[0])
        batch = augment(batch, aug_seed, aug_spec)
    return batch


def prefetch(make, steps, depth: int = 2):
    """Yield ``(step, make(step))`` with batches built ahead in a worker thread."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def worker():
        try:
            for s in steps:
                if stop.is_set():
                    return
                q.put((s, make(s), None))
        except BaseException as e:  # surfaced in the consumer
            q.put((None, None, e))
            return
        q.put((None, None, StopIteration()))

    th = threading.Thread(target=worker, daemon=True)
    th.start()
    try:
        while True:
            s, item, err = q.get()
            if isinstance(err, StopIteration):
                return
            if err is not None:
                raise err
            yield s, item
    finally:
        stop.set()
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(timeout=0.05)


def train(ds: SequenceDataset, net_cfg: NetworkConfig, cfg: TrainConfig, out_dir=None,
          net: SeqVONet | None = None, optim: OptimState | None = None, start_step: int = 0,
          stop_step: int | None = None, callback=None):
    """Run the training loop from ``start_step`` to ``stop_step`` (default ``cfg.iterations``).

    Writes ``train_log.csv`` and checkpoints into ``out_dir`` when given.
    Returns ``(net, optim, reports)``.
    """
    if net is None:
        net = SeqVONet(net_cfg, init_params(net_cfg, cfg.seed))
    if optim is None:
        optim = OptimState(step=start_step)
    stop = cfg.iterations if stop_step is None else stop_step
    out = Path(out_dir) if out_dir is not None else None
    logger = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logger = L.TrainingLog(out / "train_log.csv", append=start_step > 0 and (out / "train_log.csv").exists())
    reports = []
    try:
        for step, batch in prefetch(lambda s: batch_for_step(ds, cfg, net_cfg, s), range(start_step, stop)):
            rep = train_step(net, batch, optim, cfg, step)
            reports.append(rep)
            if logger is not None:
                logger.write(step, rep)
            if callback is not None:
                callback(step, rep)
            if out is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
                checkpoint_save(out / f"ckpt_{step + 1:06d}.bin", net, optim, step + 1, cfg)
        if out is not None:
            checkpoint_save(out / "ckpt_last.bin", net, optim, optim.step, cfg)
    finally:
        if logger is not None:
            logger.close()
    return net, optim, reports


# -- configuration files ----------------------------------------------------------------------

def _parse_value(text: str, kind):
    if kind is bool or kind == "bool":
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int or kind == "int":
        return int(text)
    return float(text)


def _field_types(cls):
    hints = {"int": int, "float": float, "bool": bool}
    return {f.name: hints.get(f.type if isinstance(f.type, str) else f.type.__name__, float) for f in fields(cls)}


def parse_config(text: str, desk: bool = True):
    """Parse flat ``key=value`` lines into ``(NetworkConfig, TrainConfig)``.

    Keys are the field names of :class:`NetworkConfig`, :class:`TrainConfig`
    and :class:`LossWeights`; ``preset=desk|full`` picks the base defaults.
    """
    kv = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k] = v
    preset = kv.pop("preset", "desk" if desk else "full")
    if preset not in ("desk", "full"):
        raise ValueError(f"unknown preset {preset!r}")
    nt, tt, wt = _field_types(NetworkConfig), _field_types(TrainConfig), _field_types(L.LossWeights)
    tt.pop("weights")
    nk, tk, wk = {}, {}, {}
    for k, v in kv.items():
        if k in nt:
            nk[k] = _parse_value(v, nt[k])
        elif k in tt:
            tk[k] = _parse_value(v, tt[k])
        elif k in wt:
            wk[k] = _parse_value(v, wt[k])
        else:
            raise ValueError(f"unknown config key {k!r}")
    if preset == "desk":
        net_cfg = NetworkConfig.desk(**nk)
        train_cfg = TrainConfig.desk(weights=L.LossWeights(**wk), **tk)
    else:
        net_cfg = NetworkConfig(**nk)
        train_cfg = TrainConfig(weights=L.LossWeights(**wk), **tk)
    return net_cfg, train_cfg


def load_config(path, desk: bool = True):
    return parse_config(Path(path).read_text(), desk)


# -- inference -------------------------------------------------------------------------------

@dataclass
class Prediction:
    depths: list  # per frame, H x W at network resolution
    poses: list  # per consecutive pair, 6-vector T_{t<-t-1}


def predict_sequence(net: SeqVONet, ds: SequenceDataset, snippet_len: int = 15,
                     use_code: bool = True, use_lstm: bool = True) -> Prediction:
    """Depth per frame and one-step pose per pair, in overlapping chunks.

    The LSTM starts from zero at each chunk; consecutive chunks share one frame
    so that every pair is covered.
    """
    n = len(ds)
    size = (net.cfg.input_h, net.cfg.input_w)
    L_ = max(2, min(snippet_len, n))
    cfg = replace(TrainConfig.desk(), snippet_len=L_, use_code=use_code, use_lstm=use_lstm,
                  weights=replace(L.LossWeights(), lambda_t=0.0))
    dtype = net.store["gen.lstm.b"].dtype
    depths: list = [None] * n
    poses: list = [None] * (n - 1)
    start = 0
    with ad.no_grad():
        while start < n - 1:
            length = min(L_, n - start)
            sn = make_snippet(ds, start, length, size)
            imgs = sn.images.astype(dtype)
            codes = refined_codes(net, sn.flows[:, None], cfg, dtype)
            d = net.depthnet_forward(imgs, codes)[-1]
            frames = rgbd(imgs, d)
            p, _ = net.posemask_forward(frames[:-1], frames[1:])
            for j in range(length):
                if depths[start + j] is None:
                    depths[start + j] = d.value[j, 0].astype(np.float64)
            for j in range(length - 1):
                poses[start + j] = p.value[j].astype(np.float64)
            start += length - 1
    return Prediction(depths, poses)
