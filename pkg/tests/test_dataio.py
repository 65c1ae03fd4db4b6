import numpy as np
import pytest

from seqvo import dataio as D
from seqvo.evaluation import accumulate, relative_poses
from seqvo.geometry import Intrinsics, invert, pose_to_transform
from seqvo.warp import synthesize


def test_identity_pose_line(tmp_path):
    (tmp_path / "p.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 0\n")
    assert np.array_equal(D.load_poses(tmp_path / "p.txt")[0], np.eye(4))


def test_wrong_token_count_names_line(tmp_path):
    (tmp_path / "p.txt").write_text("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n")
    with pytest.raises(D.FormatError, match=":2:"):
        D.load_poses(tmp_path / "p.txt")


def test_non_rigid_rejected(tmp_path):
    (tmp_path / "p.txt").write_text("2 0 0 0 0 1 0 0 0 0 1 0\n")
    with pytest.raises(D.FormatError, match="orthonormal"):
        D.load_poses(tmp_path / "p.txt")


def test_pose_file_round_trip_bitwise(tmp_path, scene7):
    D.save_poses(tmp_path / "p.txt", scene7.gt_poses)
    back = D.load_poses(tmp_path / "p.txt")
    assert all(np.array_equal(a, b) for a, b in zip(back, scene7.gt_poses))


def test_relative_motion_recovers_generator_motion(tmp_path):
    motion = D.MotionSpec(forward=0.2, lateral=0.0, yaw=0.0)
    ds = D.synth_scene(1, 5, motion)
    D.save_poses(tmp_path / "p.txt", ds.gt_poses)
    for T in D.relative_motion(D.load_poses(tmp_path / "p.txt")):
        np.testing.assert_allclose(T, pose_to_transform((0, 0, 0, 0, 0, 0.2)), atol=1e-12)


def test_accumulate_relative_round_trip(scene7):
    traj = accumulate(relative_poses(scene7.gt_poses))
    base = invert(scene7.gt_poses[0])
    for A, B in zip(traj, scene7.gt_poses):
        np.testing.assert_allclose(A, base @ B, atol=1e-9)


def test_intrinsics_file(tmp_path):
    (tmp_path / "calib.txt").write_text("100 100 52 16\n")
    K = D.load_intrinsics(tmp_path / "calib.txt")
    assert (K.fx, K.fy, K.cx, K.cy) == (100, 100, 52, 16)


def test_ppm_red_pixel(tmp_path):
    (tmp_path / "r.ppm").write_bytes(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
    np.testing.assert_array_equal(D.load_image(tmp_path / "r.ppm")[:, 0, 0], [1, 0, 0])


def test_pgm_with_comment_and_16bit(tmp_path):
    (tmp_path / "g.pgm").write_bytes(b"P5\n# note\n2 1\n65535\n" + np.array([0, 65535], ">u2").tobytes())
    img = D.load_image(tmp_path / "g.pgm")
    assert img.shape == (3, 1, 2)
    np.testing.assert_array_equal(img[0, 0], [0, 1])


def test_unsupported_format_names_magic(tmp_path):
    (tmp_path / "x.img").write_bytes(b"GIF89a....")
    with pytest.raises(D.FormatError, match="GIF8"):
        D.load_image(tmp_path / "x.img")


def test_png_and_ppm_decoders_agree(tmp_path, scene7):
    img = scene7.frames[3]
    D.save_image(tmp_path / "a.png", img)
    D.save_image(tmp_path / "a.ppm", img)
    assert np.array_equal(D.load_image(tmp_path / "a.png"), D.load_image(tmp_path / "a.ppm"))


def test_depth_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    q = rng.integers(0, 65536, (5, 7)) / 256.0
    D.write_depth_pgm(tmp_path / "d.pgm", q)
    assert np.array_equal(D.read_depth_pgm(tmp_path / "d.pgm"), q)
    d = rng.uniform(0.1, 100, (5, 7))
    D.write_depth_pgm(tmp_path / "e.pgm", d)
    assert np.max(np.abs(D.read_depth_pgm(tmp_path / "e.pgm") - d)) <= 0.5 / 256


def test_synth_deterministic_and_identity_motion():
    a, b = D.synth_scene(4, 5), D.synth_scene(4, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
    c = D.synth_scene(5, 5)
    assert not np.array_equal(a.frames[0], c.frames[0])
    still = D.synth_scene(4, 4, D.MotionSpec.identity())
    assert all(np.array_equal(f, still.frames[0]) for f in still.frames)


def test_synth_requires_two_frames():
    with pytest.raises(ValueError):
        D.synth_scene(0, 1)


def test_plane_depth_constant():
    ds = D.synth_scene(2, 2, D.MotionSpec.identity())
    d = ds.gt_depths[0]
    # camera at the origin looking along +z: every plane pixel has depth equal to the plane's z
    rng = np.random.default_rng(2)
    n = int(rng.integers(2, 5))
    depths = np.sort(rng.uniform(5.0, 15.0, n))
    for i in range(1, n):
        depths[i] = max(depths[i], depths[i - 1] + 1.0)
    vals = set(np.round(np.unique(d), 9))
    assert vals <= set(np.round(depths, 9)) | {30.0}
    assert 30.0 in vals


def test_snippet_shapes(scene7):
    sn = D.make_snippet(scene7, 3, 9)
    assert sn.images.shape == (9, 3, 32, 104)
    assert sn.flows.shape == (8, 2, 32, 104)
    small = D.make_snippet(scene7, 0, 4, (16, 52))
    assert small.images.shape == (4, 3, 16, 52)
    np.testing.assert_allclose(small.K[0, 0], scene7.intrinsics.fx / 2)
    with pytest.raises(IndexError):
        D.make_snippet(scene7, 25, 9)


def test_sample_batch_deterministic_per_step(scene7):
    a = D.sample_batch(scene7, 3, 9, seed=1, step=5)
    b = D.sample_batch(scene7, 3, 9, seed=1, step=5)
    assert all(np.array_equal(x.images, y.images) for x, y in zip(a, b))


def test_zero_augmentation_is_identity(scene7):
    sn = D.make_snippet(scene7, 0, 3)
    out = D.augment([sn], seed=0, spec=D.AugmentSpec.none())[0]
    assert np.array_equal(out.images, sn.images)
    assert np.array_equal(out.K, sn.K)


def test_zoom_scales_focal(scene7):
    sn = D.make_snippet(scene7, 0, 3)
    out = D.augment_snippet(sn, 0.0, 1.1, np.ones(3))
    np.testing.assert_allclose(out.K[0, 0], 1.1 * sn.K[0, 0])
    np.testing.assert_allclose(out.K[1, 1], 1.1 * sn.K[1, 1])


def _masked_mae(sn, t):
    K = sn.K
    T = invert(sn.gt_poses[t + 1]) @ sn.gt_poses[t]
    res = synthesize(sn.images[t + 1][None].astype(np.float64), sn.gt_depths[t][None, None], T[None], K)
    m = res.valid[0, 0] > 0
    return np.abs(res.image.value[0] - sn.images[t])[:, m].mean()


def test_augmentation_preserves_photometric_consistency(scene7):
    sn = D.make_snippet(scene7, 4, 6)
    rng = np.random.default_rng(3)
    for _ in range(3):
        theta, zoom, _ = D.augment_params(rng, D.AugmentSpec())
        out = D.augment_snippet(sn, theta, zoom, np.ones(3))
        for t in range(5):
            assert abs(_masked_mae(out, t) - _masked_mae(sn, t)) < 0.005


def test_augmented_identity_warp_reproduces_source(scene7):
    sn = D.make_snippet(scene7, 0, 2)
    out = D.augment_snippet(sn, 0.05, 1.1, np.array([0.9, 1.0, 1.1]))
    res = synthesize(out.images[1][None], out.gt_depths[0][None, None], np.eye(4)[None], out.K)
    assert np.array_equal(res.image.value[0], out.images[1])


def test_augmented_flows_follow_homography(scene7):
    sn = D.make_snippet(scene7, 5, 3)
    out = D.augment_snippet(sn, 0.04, 1.08, np.ones(3))
    from seqvo.warp import rigid_flow

    T = invert(out.gt_poses[0]) @ out.gt_poses[1]
    expect = rigid_flow(out.gt_depths[1], T, out.K)
    ok = expect.valid[2:-2, 2:-2]
    err = np.abs(out.flows[0].transpose(1, 2, 0)[2:-2, 2:-2] - expect.uv[2:-2, 2:-2])[ok]
    assert np.median(err) < 0.05


def test_dataset_round_trip_on_disk(tmp_path):
    ds = D.synth_scene(8, 4)
    D.write_sequence(ds, tmp_path, "03", ".ppm")
    back = D.load_sequence(tmp_path, "03")
    assert back.flow_source.variant == "file"
    assert back.intrinsics.fx == ds.intrinsics.fx
    assert all(np.array_equal(a, b) for a, b in zip(back.gt_poses, ds.gt_poses))
    assert all(np.max(np.abs(a - b)) <= 0.5 / 255 + 1e-7 for a, b in zip(back.frames, ds.frames))


def test_missing_sequence_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="sequences"):
        D.load_sequence(tmp_path, "09")


def test_motion_spec_parse():
    assert D.MotionSpec.parse("identity") == D.MotionSpec.identity()
    assert D.MotionSpec.parse("forward=0.5,yaw=0").forward == 0.5
