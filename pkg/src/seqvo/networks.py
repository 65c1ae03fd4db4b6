"""The five sub-networks and their parameter store.

* flow encoder: optical flow -> code
* code LSTM: code sequence -> refined codes
* DepthNet: image + refined code -> 4-scale depth
* PoseMaskNet: two RGBD frames -> 6-DoF pose + 4-scale explainability masks
* discriminator: (candidate, condition) image pair -> probability of "real"

Hidden convolutions use a learned per-channel gain and bias in place of batch
normalisation.  Decoder up-sampling uses stride-2 transposed convolutions and
crops to the matching encoder resolution, so inputs need not be multiples of
``2 ** encoder_levels``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Variable

ENC_KERNELS = (7, 5, 3, 3, 3, 3)
ENC_MULTS = (1, 2, 4, 4, 8, 8)
DEC_MULTS = (4, 4, 2, 2, 1, 1)  # decoder levels 6 .. 1
POSE_SCALE = 0.01
DEPTH_MIN_INV = 0.01
DEPTH_SCALE = 10.0


@dataclass(frozen=True)
class NetworkConfig:
    input_h: int = 128
    input_w: int = 416
    base_channels: int = 32
    code_dim: int = 128
    num_scales: int = 4
    lstm_hidden: int = 128
    encoder_levels: int = 6

    def __post_init__(self):
        if self.encoder_levels != len(ENC_KERNELS):
            raise ValueError(f"encoder_levels must be {len(ENC_KERNELS)}")
        if self.num_scales != 4:
            raise ValueError("exactly 4 prediction scales are supported")
        if min(self.input_h, self.input_w, self.base_channels, self.code_dim, self.lstm_hidden) <= 0:
            raise ValueError("all sizes must be positive")

    @classmethod
    def desk(cls, **kw) -> "NetworkConfig":
        base = dict(input_h=32, input_w=104, base_channels=8, code_dim=32, lstm_hidden=32)
        base.update(kw)
        return cls(**base)

    @property
    def enc_channels(self):
        return [self.base_channels * m for m in ENC_MULTS]

    @property
    def dec_channels(self):
        return [self.base_channels * m for m in DEC_MULTS]

    def level_sizes(self):
        """Spatial sizes of the input and every encoder level."""
        sizes = [(self.input_h, self.input_w)]
        h, w = sizes[0]
        for k in ENC_KERNELS:
            p = k // 2
            h = (h + 2 * p - k) // 2 + 1
            w = (w + 2 * p - k) // 2 + 1
            sizes.append((h, w))
        return sizes

    def scale_sizes(self):
        """Prediction sizes, coarse to fine (1/8, 1/4, 1/2, 1 of the input)."""
        s = self.level_sizes()
        return [s[3], s[2], s[1], s[0]]


@dataclass
class LstmState:
    h: Variable
    cell: Variable


class ParamStore:
    """Named parameters, each registered exactly once."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.params: dict[str, Variable] = {}

    def add(self, name: str, value: np.ndarray) -> Variable:
        if name in self.params:
            raise KeyError(f"parameter {name!r} registered twice")
        v = Variable(value, requires_grad=True, name=name)
        self.params[name] = v
        return v

    def __getitem__(self, name) -> Variable:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def group(self, prefix: str):
        return [v for k, v in self.params.items() if k.startswith(prefix)]

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(self.seed)
        for k, v in self.params.items():
            out.add(k, v.value.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        return self.astype(next(iter(self.params.values())).dtype)

    def zero_grad(self):
        for v in self.params.values():
            v.grad = None


def count_params(store: ParamStore) -> int:
    return int(sum(v.value.size for v in store.params.values()))


# -- initialisation ---------------------------------------------------------------------

class _Init:
    def __init__(self, store: ParamStore, rng, dtype):
        self.store, self.rng, self.dtype = store, rng, dtype

    def uniform(self, name, shape, fan_in, gain=6.0):
        b = np.sqrt(gain / fan_in)
        self.store.add(name, self.rng.uniform(-b, b, shape).astype(self.dtype))

    def zeros(self, name, shape):
        self.store.add(name, np.zeros(shape, self.dtype))

    def ones(self, name, shape):
        self.store.add(name, np.ones(shape, self.dtype))

    def conv(self, name, cin, cout, k, hidden=True):
        self.uniform(f"{name}.w", (cout, cin, k, k), cin * k * k, 6.0 if hidden else 3.0)
        if hidden:
            self.ones(f"{name}.gain", (cout,))
        self.zeros(f"{name}.b", (cout,))

    def deconv(self, name, cin, cout, k=2, stride=2):
        self.uniform(f"{name}.w", (cin, cout, k, k), cin * k * k / (stride * stride))
        self.ones(f"{name}.gain", (cout,))
        self.zeros(f"{name}.b", (cout,))

    def fc(self, name, din, dout, zero=False):
        if zero:
            self.zeros(f"{name}.w", (din, dout))
        else:
            self.uniform(f"{name}.w", (din, dout), din, 3.0)
        self.zeros(f"{name}.b", (dout,))


def _init_encoder(ini: _Init, name, cin, channels):
    for i, (c, k) in enumerate(zip(channels, ENC_KERNELS)):
        ini.conv(f"{name}.conv{i + 1}", cin, c, k)
        cin = c


def _init_decoder(ini: _Init, name, cfg: NetworkConfig, bottleneck_extra: int):
    enc = cfg.enc_channels
    dec = cfg.dec_channels
    cin = enc[-1] + bottleneck_extra
    for j, level in enumerate(range(6, 0, -1)):
        c = dec[j]
        ini.deconv(f"{name}.up{level}", cin, c)
        skip = enc[level - 2] if level >= 2 else 0
        ini.conv(f"{name}.iconv{level}", c + skip, c, 3)
        if level <= 4:
            ini.conv(f"{name}.pred{level}", c, 1, 3, hidden=False)
        cin = c


def init_params(cfg: NetworkConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Fan-in scaled uniform weights, zero biases, unit gains, zero pose heads."""
    store = ParamStore(seed)
    ini = _Init(store, np.random.default_rng(seed), dtype)
    enc = cfg.enc_channels
    # flow encoder: final level emits the code
    _init_encoder(ini, "gen.flowenc", 2, enc[:-1] + [cfg.code_dim])
    # LSTM, gates ordered (input, forget, candidate, output)
    H = cfg.lstm_hidden
    ini.uniform("gen.lstm.wx", (cfg.code_dim, 4 * H), cfg.code_dim, 3.0)
    ini.uniform("gen.lstm.wh", (H, 4 * H), H, 3.0)
    ini.zeros("gen.lstm.b", (4 * H,))
    ini.fc("gen.lstm.proj", H, cfg.code_dim)
    # DepthNet
    _init_encoder(ini, "gen.depth.enc", 3, enc)
    _init_decoder(ini, "gen.depth.dec", cfg, cfg.code_dim)
    # PoseMaskNet
    _init_encoder(ini, "gen.pose.enc", 8, enc)
    ini.fc("gen.pose.fc_rot", enc[-1], 3, zero=True)
    ini.fc("gen.pose.fc_trans", enc[-1], 3, zero=True)
    _init_decoder(ini, "gen.pose.dec", cfg, 0)
    # discriminator
    _init_encoder(ini, "disc.enc", 6, enc)
    ini.fc("disc.fc", enc[-1], 1)
    return store


# -- layers --------------------------------------------------------------------------------

def _conv(store, name, x, stride, hidden=True):
    w = store[f"{name}.w"]
    k = w.shape[-1]
    if hidden:
        y = ad.conv2d(x, w, None, stride, k // 2)
        y = y * store[f"{name}.gain"].reshape(1, -1, 1, 1) + store[f"{name}.b"].reshape(1, -1, 1, 1)
        return ad.relu(y)
    return ad.conv2d(x, w, store[f"{name}.b"], stride, k // 2)


def _deconv(store, name, x, size):
    y = ad.conv_transpose2d(x, store[f"{name}.w"], None, 2, 0)
    h, w = size
    if y.shape[2] != h or y.shape[3] != w:
        y = y[:, :, :h, :w]
    y = y * store[f"{name}.gain"].reshape(1, -1, 1, 1) + store[f"{name}.b"].reshape(1, -1, 1, 1)
    return ad.relu(y)


def _fc(store, name, x):
    return ad.matmul(x, store[f"{name}.w"]) + store[f"{name}.b"]


def _encode(store, name, x):
    feats = []
    for i in range(len(ENC_KERNELS)):
        x = _conv(store, f"{name}.conv{i + 1}", x, 2)
        feats.append(x)
    return feats


def _decode(store, name, feats, bottleneck, input_size):
    """Returns the four head logits, coarse to fine."""
    sizes = [input_size] + [f.shape[2:] for f in feats]
    x = bottleneck
    logits = []
    for level in range(6, 0, -1):
        x = _deconv(store, f"{name}.up{level}", x, sizes[level - 1])
        if level >= 2:
            x = ad.concat([x, feats[level - 2]], axis=1)
        x = _conv(store, f"{name}.iconv{level}", x, 1)
        if level <= 4:
            logits.append(_conv(store, f"{name}.pred{level}", x, 1, hidden=False))
    return logits


class SeqVONet:
    """Forward passes of all sub-networks over a shared :class:`ParamStore`."""

    def __init__(self, cfg: NetworkConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    def _check(self, x, channels, what):
        if x.ndim != 4 or x.shape[1] != channels:
            raise ad.ShapeError(f"{what} expects B x {channels} x H x W, got {x.shape}")

    def encoder_forward(self, flow) -> Variable:
        """``B x 2 x H x W`` flow -> ``B x code_dim`` code."""
        flow = ad.as_variable(flow)
        self._check(flow, 2, "flow encoder")
        feats = _encode(self.store, "gen.flowenc", flow)
        return ad.global_avg_pool(feats[-1])

    def initial_state(self, batch: int, dtype=None) -> LstmState:
        dtype = dtype or self.store["gen.lstm.b"].dtype
        z = np.zeros((batch, self.cfg.lstm_hidden), dtype)
        return LstmState(Variable(z), Variable(z.copy()))

    def lstm_step(self, code, state: LstmState):
        """One LSTM step; returns ``(refined_code, new_state)``."""
        s = self.store
        H = self.cfg.lstm_hidden
        code = ad.as_variable(code)
        z = ad.matmul(code, s["gen.lstm.wx"]) + ad.matmul(state.h, s["gen.lstm.wh"]) + s["gen.lstm.b"]
        i = ad.sigmoid(z[:, 0:H])
        f = ad.sigmoid(z[:, H:2 * H])
        g = ad.tanh(z[:, 2 * H:3 * H])
        o = ad.sigmoid(z[:, 3 * H:4 * H])
        cell = f * state.cell + i * g
        h = o * ad.tanh(cell)
        refined = _fc(s, "gen.lstm.proj", h)
        return refined, LstmState(h, cell)

    def depthnet_forward(self, image, code) -> list:
        """``B x 3 x H x W`` image and ``B x code_dim`` code -> 4 depth maps, coarse to fine."""
        image = ad.as_variable(image)
        self._check(image, 3, "DepthNet")
        feats = _encode(self.store, "gen.depth.enc", image)
        b = feats[-1]
        B, _, h, w = b.shape
        code = ad.as_variable(code, image)
        tiled = ad.broadcast_to(code.reshape(B, -1, 1, 1), (B, code.shape[1], h, w))
        bott = ad.concat([b, tiled], axis=1)
        logits = _decode(self.store, "gen.depth.dec", feats, bott, image.shape[2:])
        return [1.0 / (ad.sigmoid(x) * DEPTH_SCALE + DEPTH_MIN_INV) for x in logits]

    def posemask_forward(self, rgbd_a, rgbd_b):
        """Two ``B x 4 x H x W`` RGBD stacks -> (``B x 6`` pose ``T_b<-a``, 4 masks)."""
        rgbd_a, rgbd_b = ad.as_variable(rgbd_a), ad.as_variable(rgbd_b)
        self._check(rgbd_a, 4, "PoseMaskNet")
        self._check(rgbd_b, 4, "PoseMaskNet")
        x = ad.concat([rgbd_a, rgbd_b], axis=1)
        feats = _encode(self.store, "gen.pose.enc", x)
        pooled = ad.global_avg_pool(feats[-1])
        rot = _fc(self.store, "gen.pose.fc_rot", pooled) * POSE_SCALE
        trans = _fc(self.store, "gen.pose.fc_trans", pooled) * POSE_SCALE
        pose = ad.concat([rot, trans], axis=1)
        logits = _decode(self.store, "gen.pose.dec", feats, feats[-1], x.shape[2:])
        return pose, [ad.sigmoid(m) for m in logits]

    def discriminator_forward(self, candidate, condition) -> Variable:
        """Probability (``B x 1``) that ``candidate`` is a real view given ``condition``."""
        candidate = ad.as_variable(candidate)
        condition = ad.as_variable(condition, candidate)
        self._check(candidate, 3, "discriminator")
        self._check(condition, 3, "discriminator")
        feats = _encode(self.store, "disc.enc", ad.concat([candidate, condition], axis=1))
        return ad.sigmoid(_fc(self.store, "disc.fc", ad.global_avg_pool(feats[-1])))


def rgbd(image, depth) -> Variable:
    """Stack an image with its per-image mean-normalised depth."""
    image = ad.as_variable(image)
    depth = ad.as_variable(depth, image)
    d = depth / depth.mean(axis=(1, 2, 3), keepdims=True)
    return ad.concat([image, d], axis=1)


# -- checkpoints ------------------------------------------------------------------------------

CKPT_MAGIC = b"SEQVOCKP"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, header: dict) -> None:
    """Write named float arrays as little-endian float32 blobs after a JSON header."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    head = dict(header, entries=entries)
    hb = json.dumps(head, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)


def load_checkpoint(path):
    """Returns ``(arrays, header)``."""
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC or len(data) < 16:
        raise CheckpointError(f"{path}: not a checkpoint of a known version (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    try:
        header = json.loads(data[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupted header ({e}); version check failed") from None
    base = 16 + hlen
    arrays = {}
    for e in header.pop("entries"):
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        if start + 4 * n > len(data):
            raise CheckpointError(f"{path}: truncated blob for {e['name']}")
        arrays[e["name"]] = np.frombuffer(data, dtype="<f4", count=n, offset=start).reshape(e["shape"]).astype(np.float32)
    return arrays, header


def config_to_dict(cfg) -> dict:
    return asdict(cfg)


def config_from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})
