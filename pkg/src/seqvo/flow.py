"""Optical-flow input: Middlebury ``.flo`` files or synthetic rigid flow.

Flow convention: for each pixel of frame ``t``, the displacement ``(u, v)``
to its location in frame ``t-1``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FLO_MAGIC = 202021.25  # b"PIEH" as a little-endian float32


class FlowFormatError(ValueError):
    pass


@dataclass
class FlowField:
    uv: np.ndarray  # H x W x 2
    valid: np.ndarray | None = None  # H x W bool

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.ones(self.uv.shape[:2], dtype=bool)

    @property
    def shape(self):
        return self.uv.shape[:2]

    def to_chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.uv.transpose(2, 0, 1))


def write_flo(path, flow) -> None:
    uv = flow.uv if isinstance(flow, FlowField) else np.asarray(flow)
    h, w = uv.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(np.ascontiguousarray(uv, dtype="<f4").tobytes())


def read_flo(path) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FlowFormatError(f"{path}: {len(data)} bytes is too short for a .flo header")
    (magic,) = struct.unpack("<f", data[:4])
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
    w, h = struct.unpack("<ii", data[4:12])
    need = 2 * w * h * 4
    if w <= 0 or h <= 0 or len(data) - 12 != need:
        raise FlowFormatError(
            f"{path}: payload length {len(data) - 12} does not match {w}x{h} flow ({need} bytes)"
        )
    uv = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)
    return FlowField(uv)


def resize_flow(flow: FlowField, height: int, width: int) -> FlowField:
    """Bilinear resize; displacement values are rescaled by the resize ratio."""
    h, w = flow.shape
    if (h, w) == (height, width):
        return flow
    from .autodiff import Variable, resize_bilinear

    chw = flow.uv.transpose(2, 0, 1)[None].astype(np.float64)
    out = resize_bilinear(Variable(chw), height, width).value[0]
    out[0] *= width / w
    out[1] *= height / h
    valid = resize_bilinear(Variable(flow.valid[None, None].astype(np.float64)), height, width).value[0, 0] > 0.999
    return FlowField(out.transpose(1, 2, 0).astype(flow.uv.dtype), valid)


@dataclass
class FlowSource:
    """Either a directory of ``<frame:06>.flo`` files or synthetic ground truth.

    ``directory`` holds the files for one sequence (``flow/<seq>/``).  The
    synthetic variant keeps per-frame depths (frame ``t``), camera-to-world
    poses and intrinsics.
    """

    directory: Path | None = None
    depths: list | None = None
    poses: list | None = None
    intrinsics: object = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if (self.directory is None) == (self.depths is None):
            raise ValueError("exactly one of directory / synthetic ground truth must be given")

    @property
    def variant(self) -> str:
        return "file" if self.directory is not None else "synthetic"


def flow_for(source: FlowSource, t: int) -> FlowField:
    """Flow from frame ``t-1`` to frame ``t`` (pixels of ``t`` to ``t-1``)."""
    if t < 1:
        raise ValueError(f"flow needs t >= 1, got {t}")
    if t in source._cache:
        return source._cache[t]
    if source.variant == "file":
        path = Path(source.directory) / f"{t:06d}.flo"
        if not path.exists():
            raise FileNotFoundError(f"no flow file for frame {t}: {path}")
        out = read_flo(path)
    else:
        from .geometry import invert
        from .warp import rigid_flow

        # frame t coords -> frame t-1 coords
        T = invert(source.poses[t - 1]) @ source.poses[t]
        out = rigid_flow(source.depths[t], T, source.intrinsics)
    source._cache[t] = out
    return out
