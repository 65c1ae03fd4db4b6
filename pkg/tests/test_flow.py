import struct

import numpy as np
import pytest

from seqvo.dataio import MotionSpec, synth_scene
from seqvo.flow import FLO_MAGIC, FlowField, FlowFormatError, FlowSource, flow_for, read_flo, resize_flow, write_flo
from seqvo.geometry import invert
from seqvo.warp import rigid_flow


def test_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    f = FlowField(rng.normal(size=(3, 4, 2)).astype(np.float32))
    write_flo(tmp_path / "a.flo", f)
    g = read_flo(tmp_path / "a.flo")
    assert g.uv.tobytes() == f.uv.tobytes()


def test_layout_and_size(tmp_path):
    write_flo(tmp_path / "z.flo", np.zeros((2, 2, 2), np.float32))
    data = (tmp_path / "z.flo").read_bytes()
    assert len(data) == 12 + 32
    assert data[:4] == b"PIEH"
    assert struct.unpack("<f", data[:4])[0] == FLO_MAGIC
    assert struct.unpack("<ii", data[4:12]) == (2, 2)


def test_row_major_interleaved(tmp_path):
    uv = np.arange(12, dtype=np.float32).reshape(2, 3, 2)
    write_flo(tmp_path / "r.flo", uv)
    payload = np.frombuffer((tmp_path / "r.flo").read_bytes()[12:], "<f4")
    assert np.array_equal(payload, np.arange(12))


def test_bad_magic(tmp_path):
    (tmp_path / "bad.flo").write_bytes(struct.pack("<f", 0.0) + struct.pack("<ii", 1, 1) + bytes(8))
    with pytest.raises(FlowFormatError, match="magic"):
        read_flo(tmp_path / "bad.flo")


def test_truncated(tmp_path):
    write_flo(tmp_path / "t.flo", np.zeros((2, 2, 2), np.float32))
    data = (tmp_path / "t.flo").read_bytes()
    (tmp_path / "t.flo").write_bytes(data[:-4])
    with pytest.raises(FlowFormatError, match="length"):
        read_flo(tmp_path / "t.flo")


def test_file_variant_passthrough_and_missing(tmp_path):
    f = FlowField(np.random.default_rng(1).normal(size=(4, 5, 2)).astype(np.float32))
    write_flo(tmp_path / "000003.flo", f)
    src = FlowSource(directory=tmp_path)
    assert src.variant == "file"
    assert np.array_equal(flow_for(src, 3).uv, f.uv)
    with pytest.raises(FileNotFoundError, match="frame 4"):
        flow_for(src, 4)


def test_synthetic_identity_motion_is_zero():
    ds = synth_scene(3, 4, MotionSpec.identity())
    assert ds.flow_source.variant == "synthetic"
    for t in range(1, 4):
        assert not flow_for(ds.flow_source, t).uv.any()


def test_synthetic_matches_rigid_flow_bitwise(scene7):
    ds = scene7
    for t in (1, 5, 17):
        expect = rigid_flow(ds.gt_depths[t], invert(ds.gt_poses[t - 1]) @ ds.gt_poses[t], ds.intrinsics)
        assert np.array_equal(flow_for(ds.flow_source, t).uv, expect.uv)


def test_synthetic_plane_translation_flow():
    from seqvo.geometry import Intrinsics, pose_to_transform

    K = Intrinsics(60.0, 60.0, 51.5, 15.5, 104, 32)
    d, tx = 8.0, 0.25
    depths = [np.full((32, 104), d)] * 2
    poses = [np.eye(4), pose_to_transform((0, 0, 0, tx, 0, 0))]  # camera moves +x
    f = flow_for(FlowSource(depths=depths, poses=poses, intrinsics=K), 1)
    np.testing.assert_allclose(f.uv[..., 0][f.valid], K.fx * tx / d, atol=1e-6)
    np.testing.assert_allclose(f.uv[..., 1][f.valid], 0.0, atol=1e-6)


def test_resize_flow_scales_values():
    f = FlowField(np.ones((4, 6, 2), np.float32))
    g = resize_flow(f, 8, 3)
    np.testing.assert_allclose(g.uv[..., 0], 0.5)
    np.testing.assert_allclose(g.uv[..., 1], 2.0)


def test_source_requires_exactly_one_variant(tmp_path):
    with pytest.raises(ValueError):
        FlowSource()
    with pytest.raises(ValueError):
        FlowSource(directory=tmp_path, depths=[])
