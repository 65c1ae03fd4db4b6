"""Datasets: KITTI-style files, the synthetic scene renderer, augmentation.

Directory layout (relative to a dataset root)::

    sequences/<id>/image/<frame:06>.png|ppm
    sequences/<id>/calib.txt            fx fy cx cy
    sequences/<id>/depth/<frame:06>.pgm 16-bit, value / 256 = metres, 0 = missing
    poses/<id>.txt                      12 numbers per line, camera-to-world
    flow/<id>/<frame:06>.flo            flow from frame t-1 to t
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._backend import kernels
from .flow import FlowField, FlowSource, flow_for, resize_flow, write_flo
from .geometry import Intrinsics, invert, is_rigid, pose_to_transform, Pose6


class FormatError(ValueError):
    pass


# -- poses / calibration ---------------------------------------------------------

def load_poses(path) -> list[np.ndarray]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise FormatError(f"{path}:{lineno}: expected 12 numbers, got {len(tokens)}")
        try:
            vals = [float(t) for t in tokens]
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from None
        T = np.eye(4)
        T[:3, :] = np.array(vals).reshape(3, 4)
        if not is_rigid(T, tol=1e-3):
            raise FormatError(f"{path}:{lineno}: rotation is not orthonormal")
        poses.append(T)
    return poses


def format_pose_line(T) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(T)[:3, :].ravel())


def save_poses(path, poses) -> None:
    Path(path).write_text("".join(format_pose_line(T) + "\n" for T in poses))


def relative_motion(poses) -> list[np.ndarray]:
    """``T_i^-1 @ T_{i+1}`` for consecutive camera-to-world poses."""
    return [invert(a) @ b for a, b in zip(poses[:-1], poses[1:])]


def load_intrinsics(path, width: int | None = None, height: int | None = None) -> Intrinsics:
    tokens = Path(path).read_text().split()
    if len(tokens) != 4:
        raise FormatError(f"{path}: expected 'fx fy cx cy', got {len(tokens)} tokens")
    fx, fy, cx, cy = (float(t) for t in tokens)
    return Intrinsics(fx, fy, cx, cy, width, height)


def save_intrinsics(path, K: Intrinsics) -> None:
    Path(path).write_text(f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r}\n")


# -- images ------------------------------------------------------------------------

def _read_netpbm(data: bytes, path):
    magic = data[:2]
    # header: magic, width, height, maxval separated by whitespace / comments
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace before raster
    w, h, maxval = fields
    channels = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h * channels
    raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    return raw.reshape(h, w, channels), maxval


def load_image(path) -> np.ndarray:
    """Decode a PNG or binary PPM/PGM to ``3 x H x W`` float32 on ``[0, 1]``."""
    data = Path(path).read_bytes()
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(io.BytesIO(data)) as im:
            arr = np.asarray(im)
        maxval = 65535 if arr.dtype == np.uint16 else 255
        if arr.ndim == 2:
            arr = arr[:, :, None]
        arr = arr[:, :, :3]
    elif data[:2] in (b"P5", b"P6"):
        arr, maxval = _read_netpbm(data, path)
    else:
        raise FormatError(f"{path}: unsupported image format, magic bytes {data[:4]!r}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return (arr.astype(np.float32) / np.float32(maxval)).transpose(2, 0, 1).copy()


def _to_u8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_image(path, img) -> None:
    """Write a ``3 x H x W`` image on ``[0, 1]`` as PNG or PPM (by suffix)."""
    path = Path(path)
    u8 = _to_u8(img)
    if path.suffix == ".ppm":
        h, w, _ = u8.shape
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + u8.tobytes())
    else:
        from PIL import Image

        Image.fromarray(u8, "RGB").save(path, format="PNG")


def write_depth_pgm(path, depth) -> None:
    d = np.asarray(depth, dtype=np.float64)
    q = np.clip(np.round(d * 256), 0, 65535).astype(">u2")
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + q.tobytes())


def read_depth_pgm(path) -> np.ndarray:
    """Depth in metres; 0 marks a missing value."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise FormatError(f"{path}: expected a binary PGM, magic bytes {data[:4]!r}")
    arr, _ = _read_netpbm(data, path)
    return arr[:, :, 0].astype(np.float64) / 256.0


# -- datasets ------------------------------------------------------------------------

@dataclass
class SequenceDataset:
    frames: list  # 3 x H x W float32 arrays
    intrinsics: Intrinsics
    gt_poses: list | None = None  # camera-to-world 4 x 4
    gt_depths: list | None = None  # H x W metres
    flow_source: FlowSource | None = None

    def __post_init__(self):
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise ValueError(f"frames have differing shapes {shapes}")
        for name in ("gt_poses", "gt_depths"):
            lst = getattr(self, name)
            if lst is not None and len(lst) != len(self.frames):
                raise ValueError(f"{name} has {len(lst)} entries for {len(self.frames)} frames")

    def __len__(self):
        return len(self.frames)

    @property
    def size(self):
        return self.frames[0].shape[1:]


def load_sequence(root, seq_id: str = "00") -> SequenceDataset:
    root = Path(root)
    seq = root / "sequences" / seq_id
    if not seq.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {seq}")
    img_dir = seq / "image"
    paths = sorted(p for p in img_dir.iterdir() if p.suffix in (".png", ".ppm"))
    if not paths:
        raise FileNotFoundError(f"no images in {img_dir}")
    frames = [load_image(p) for p in paths]
    H, W = frames[0].shape[1:]
    K = load_intrinsics(seq / "calib.txt", W, H)
    pose_path = root / "poses" / f"{seq_id}.txt"
    poses = load_poses(pose_path) if pose_path.exists() else None
    depth_dir = seq / "depth"
    depths = None
    if depth_dir.is_dir():
        depths = [read_depth_pgm(depth_dir / f"{p.stem}.pgm") for p in paths]
    flow_dir = root / "flow" / seq_id
    if flow_dir.is_dir():
        source = FlowSource(directory=flow_dir)
    elif poses is not None and depths is not None:
        source = FlowSource(depths=depths, poses=poses, intrinsics=K)
    else:
        source = None
    return SequenceDataset(frames, K, poses, depths, source)


def write_sequence(ds: SequenceDataset, root, seq_id: str = "00", image_ext: str = ".png") -> None:
    root = Path(root)
    seq = root / "sequences" / seq_id
    (seq / "image").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(ds.frames):
        save_image(seq / "image" / f"{i:06d}{image_ext}", f)
    save_intrinsics(seq / "calib.txt", ds.intrinsics)
    if ds.gt_poses is not None:
        (root / "poses").mkdir(parents=True, exist_ok=True)
        save_poses(root / "poses" / f"{seq_id}.txt", ds.gt_poses)
    if ds.gt_depths is not None:
        (seq / "depth").mkdir(exist_ok=True)
        for i, d in enumerate(ds.gt_depths):
            write_depth_pgm(seq / "depth" / f"{i:06d}.pgm", d)
    if ds.flow_source is not None:
        fdir = root / "flow" / seq_id
        fdir.mkdir(parents=True, exist_ok=True)
        for t in range(1, len(ds)):
            write_flo(fdir / f"{t:06d}.flo", flow_for(ds.flow_source, t))


# -- synthetic scenes ------------------------------------------------------------------

@dataclass(frozen=True)
class MotionSpec:
    """Smooth camera trajectory: steady forward motion plus sinusoidal sway.

    Lengths in metres per frame (``forward``) or metres (amplitudes), angles in
    radians, ``period`` in frames.
    """

    forward: float = 0.12
    lateral: float = 0.3
    vertical: float = 0.0
    yaw: float = 0.03
    pitch: float = 0.0
    roll: float = 0.0
    period: float = 16.0

    @classmethod
    def identity(cls) -> "MotionSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def parse(cls, text: str) -> "MotionSpec":
        """``"identity"`` or comma-separated ``key=value`` overrides."""
        if text in ("", "default"):
            return cls()
        if text == "identity":
            return cls.identity()
        kw = {}
        for part in text.split(","):
            k, _, v = part.partition("=")
            kw[k.strip()] = float(v)
        return cls(**kw)

    def pose(self, i: int, phase: float) -> np.ndarray:
        a = 2 * math.pi * i / self.period + phase
        return pose_to_transform(
            Pose6(
                self.pitch * math.sin(a + 1.0),
                self.yaw * math.cos(a),
                self.roll * math.sin(a + 2.0),
                self.lateral * (math.sin(a) - math.sin(phase)),
                self.vertical * (math.sin(a + 0.5) - math.sin(phase + 0.5)),
                self.forward * i,
            )
        )


@dataclass
class _Plane:
    depth: float  # world z of the plane
    x0: float
    x1: float
    y0: float
    y1: float
    freqs: np.ndarray  # 3 channels x J x 2 cycles per metre
    phases: np.ndarray  # 3 x J
    amps: np.ndarray  # 3 x J

    def texture(self, x, y):
        arg = 2 * np.pi * (self.freqs[..., 0, None] * x + self.freqs[..., 1, None] * y) + self.phases[..., None]
        s = (self.amps[..., None] * np.sin(arg)).sum(axis=1) / self.amps.sum(axis=1)[:, None]
        return 0.5 + 0.35 * s


def _random_plane(rng, depth, fx, bounded=True):
    J = 3
    fmax = fx / (6 * depth)
    mag = rng.uniform(0.3, 1.0, (3, J)) * fmax
    ang = rng.uniform(0, np.pi, (3, J))
    freqs = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=-1)
    phases = rng.uniform(0, 2 * np.pi, (3, J))
    amps = rng.uniform(0.5, 1.0, (3, J))
    if not bounded:
        return _Plane(depth, -np.inf, np.inf, -np.inf, np.inf, freqs, phases, amps)
    cx = rng.uniform(-0.6, 0.6) * depth
    cy = rng.uniform(-0.15, 0.15) * depth
    hw = rng.uniform(0.15, 0.4) * depth
    hh = rng.uniform(0.1, 0.3) * depth
    return _Plane(depth, cx - hw, cx + hw, cy - hh, cy + hh, freqs, phases, amps)


def render(planes, cam_to_world, K: Intrinsics, height: int, width: int):
    """Ray-cast world-fronto-parallel textured planes; returns (image, depth)."""
    v, u = np.mgrid[0:height, 0:width]
    pix = np.stack([u.ravel(), v.ravel(), np.ones(u.size)]).astype(np.float64)
    rays = K.inverse @ pix  # camera frame, z == 1
    R = cam_to_world[:3, :3]
    c = cam_to_world[:3, 3]
    dirs = R @ rays
    best = np.full(u.size, np.inf)
    img = np.zeros((3, u.size))
    for pl in planes:
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (pl.depth - c[2]) / dirs[2]
        hx = c[0] + s * dirs[0]
        hy = c[1] + s * dirs[1]
        hit = (s > 0) & (s < best) & (hx >= pl.x0) & (hx <= pl.x1) & (hy >= pl.y0) & (hy <= pl.y1)
        if hit.any():
            best[hit] = s[hit]
            img[:, hit] = pl.texture(hx[hit], hy[hit])
    best[~np.isfinite(best)] = 0.0
    return img.reshape(3, height, width).astype(np.float32), best.reshape(height, width)


def default_intrinsics(height: int, width: int) -> Intrinsics:
    f = 0.58 * width
    return Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def synth_scene(
    seed: int,
    n_frames: int,
    motion_spec: MotionSpec | None = None,
    height: int = 32,
    width: int = 104,
) -> SequenceDataset:
    """Render a textured multi-plane scene under a smooth camera trajectory."""
    if n_frames < 2:
        raise ValueError("a synthetic scene needs at least 2 frames")
    motion = motion_spec if motion_spec is not None else MotionSpec()
    rng = np.random.default_rng(seed)
    K = default_intrinsics(height, width)
    n_planes = int(rng.integers(2, 5))
    depths = np.sort(rng.uniform(5.0, 15.0, n_planes))
    for i in range(1, n_planes):  # keep planes at distinct depths
        depths[i] = max(depths[i], depths[i - 1] + 1.0)
    planes = [_random_plane(rng, float(d), K.fx) for d in depths]
    planes.append(_random_plane(rng, 30.0, K.fx, bounded=False))
    phase = float(rng.uniform(0, 2 * np.pi))
    poses = [motion.pose(i, phase) for i in range(n_frames)]
    frames, gdepths = [], []
    for T in poses:
        img, d = render(planes, T, K, height, width)
        frames.append(img)
        gdepths.append(d)
    src = FlowSource(depths=gdepths, poses=poses, intrinsics=K)
    return SequenceDataset(frames, K, poses, gdepths, src)


# -- snippets ----------------------------------------------------------------------------

@dataclass
class Snippet:
    images: np.ndarray  # L x 3 x H x W
    flows: np.ndarray  # (L - 1) x 2 x H x W, flow of frame t -> t-1 for t = 1..L-1
    K: np.ndarray  # 3 x 3
    gt_poses: np.ndarray | None = None  # L x 4 x 4 camera-to-world
    gt_depths: np.ndarray | None = None  # L x H x W

    def __len__(self):
        return self.images.shape[0]


def resize_image(img: np.ndarray, height: int, width: int) -> np.ndarray:
    from .autodiff import Variable, resize_bilinear

    if img.shape[-2:] == (height, width):
        return img
    return resize_bilinear(Variable(img[None].astype(np.float32)), height, width).value[0]


def make_snippet(ds: SequenceDataset, start: int, length: int, size=None) -> Snippet:
    if start < 0 or start + length > len(ds):
        raise IndexError(f"snippet [{start}, {start + length}) outside {len(ds)} frames")
    H, W = ds.size
    h, w = size if size is not None else (H, W)
    K = ds.intrinsics if ds.intrinsics.width is not None else ds.intrinsics.with_size(W, H)
    if (h, w) != (H, W):
        K = K.resized(w, h)
    imgs = np.stack([resize_image(ds.frames[i], h, w) for i in range(start, start + length)])
    flows = []
    for t in range(start + 1, start + length):
        f = flow_for(ds.flow_source, t) if ds.flow_source is not None else FlowField(np.zeros((H, W, 2), np.float32))
        flows.append(resize_flow(f, h, w).to_chw())
    poses = np.stack(ds.gt_poses[start:start + length]) if ds.gt_poses is not None else None
    depths = None
    if ds.gt_depths is not None and (h, w) == (H, W):
        depths = np.stack(ds.gt_depths[start:start + length])
    return Snippet(imgs.astype(np.float32), np.stack(flows).astype(np.float32), K.matrix, poses, depths)


def sample_batch(ds: SequenceDataset, batch_size: int, length: int, seed: int, step: int, size=None):
    """Deterministic batch for ``(seed, step)`` independent of earlier draws."""
    rng = np.random.default_rng([seed, step])
    starts = rng.integers(0, len(ds) - length + 1, batch_size)
    return [make_snippet(ds, int(s), length, size) for s in starts]


# -- augmentation ------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    rotation_deg: float = 5.0
    zoom: tuple = (1.0, 1.15)
    gain: tuple = (0.8, 1.2)

    @classmethod
    def none(cls) -> "AugmentSpec":
        return cls(0.0, (1.0, 1.0), (1.0, 1.0))


def _sample_clamped(img, x, y):
    """Bilinear sample ``C x H x W`` at pixel positions with edge replication."""
    C, H, W = img.shape
    xc = np.clip(x, 0, W - 1).reshape(1, -1).astype(img.dtype)
    yc = np.clip(y, 0, H - 1).reshape(1, -1).astype(img.dtype)
    return kernels.bilinear_forward(np.ascontiguousarray(img[None]), xc, yc)[0].reshape(C, *x.shape)


def augment_params(rng, spec: AugmentSpec):
    theta = math.radians(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    zoom = rng.uniform(*spec.zoom)
    gain = rng.uniform(spec.gain[0], spec.gain[1], 3)
    return theta, zoom, gain


def augment_snippet(sn: Snippet, theta: float, zoom: float, gain) -> Snippet:
    """Apply one roll/zoom/colour-gain transform to every frame of a snippet.

    The camera is rolled by ``theta`` about its optical axis and the image is
    zoomed by ``zoom`` about its centre; intrinsics, flows, depths and poses are
    updated to stay geometrically consistent.
    """
    L, C, H, W = sn.images.shape
    gain = np.asarray(gain, dtype=np.float32)
    K = np.asarray(sn.K, dtype=np.float64)
    if theta == 0.0 and zoom == 1.0:
        imgs = np.clip(sn.images * gain[None, :, None, None], 0, 1) if np.any(gain != 1) else sn.images.copy()
        return replace(sn, images=imgs.astype(np.float32))
    c0 = np.array([(W - 1) / 2, (H - 1) / 2])
    S = np.array([[zoom, 0, (1 - zoom) * c0[0]], [0, zoom, (1 - zoom) * c0[1]], [0, 0, 1]])
    K2 = S @ K
    c, s = math.cos(theta), math.sin(theta)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    Hm = K @ R @ np.linalg.inv(K2)  # new pixel -> old pixel
    v, u = np.mgrid[0:H, 0:W]
    pts = Hm @ np.stack([u.ravel(), v.ravel(), np.ones(u.size)])
    xo = (pts[0] / pts[2]).reshape(H, W)
    yo = (pts[1] / pts[2]).reshape(H, W)
    imgs = np.stack([_sample_clamped(im, xo, yo) for im in sn.images])
    imgs = np.clip(imgs * gain[None, :, None, None], 0, 1).astype(np.float32)
    Hinv = np.linalg.inv(Hm)
    flows = []
    for f in sn.flows:
        fo = _sample_clamped(f, xo, yo)
        q = Hinv @ np.stack([(xo + fo[0]).ravel(), (yo + fo[1]).ravel(), np.ones(u.size)])
        flows.append(np.stack([(q[0] / q[2]).reshape(H, W) - u, (q[1] / q[2]).reshape(H, W) - v]))
    R4 = np.eye(4)
    R4[:3, :3] = R
    poses = None if sn.gt_poses is None else np.stack([P @ R4 for P in sn.gt_poses])
    depths = None
    if sn.gt_depths is not None:
        depths = np.stack([_sample_clamped(d[None].astype(np.float64), xo, yo)[0] for d in sn.gt_depths])
    return Snippet(imgs, np.stack(flows).astype(np.float32), K2, poses, depths)


def augment(batch, seed: int, spec: AugmentSpec = AugmentSpec()):
    """Per-snippet random augmentation, shared by all frames of a snippet."""
    rng = np.random.default_rng(seed)
    return [augment_snippet(sn, *augment_params(rng, spec)) for sn in batch]
