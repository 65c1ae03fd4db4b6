import numpy as np
import pytest

from seqvo import autodiff as ad
from seqvo import gradsuite
from seqvo.cli import main, trajectory_svg
from seqvo.dataio import load_poses, load_sequence, read_depth_pgm


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["synth", "--seed", "7", "--frames", "12", "--out", str(root)]) == 0
    return root


def test_synth_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--seed", "3", "--frames", "4", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_writes_loadable_sequence(data):
    ds = load_sequence(data, "00")
    assert len(ds) == 12 and ds.gt_poses is not None and ds.gt_depths is not None


def test_missing_data_dir(tmp_path, capsys):
    missing = tmp_path / "nope"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) == 1
    assert f"data directory not found: {missing}" in capsys.readouterr().err


def test_bad_checkpoint_exit_code(tmp_path, data):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage" * 4)
    assert main(["infer", "--ckpt", str(bad), "--data", str(data), "--out", str(tmp_path / "o")]) == 1


def _bad_square(x):
    out = x.value ** 2
    return ad.Variable._from_op(out, (x,), lambda g: (g * 2.2 * x.value,))


def test_gradcheck_fault_injection_exit_2(monkeypatch, capsys):
    def broken(rng):
        return ad.grad_check(lambda x: _bad_square(x).sum(), [rng.normal(size=5)])

    monkeypatch.setitem(gradsuite._REGISTRY, "ops", [("bad_square", broken, gradsuite.OP_TOL)])
    assert main(["gradcheck", "--scope", "ops"]) == 2
    captured = capsys.readouterr()
    assert "bad_square" in captured.out and "FAIL" in captured.out
    assert "gradient check failures: bad_square" in captured.err


def test_gradcheck_ok(monkeypatch, capsys):
    keep = [c for c in gradsuite.checks("ops") if c[0] in ("add", "matmul")]
    monkeypatch.setitem(gradsuite._REGISTRY, "ops", keep)
    assert main(["gradcheck", "--scope", "ops"]) == 0
    assert capsys.readouterr().out.count(" ok ") == 2


def test_oracle_pipeline(data, tmp_path, capsys):
    out = tmp_path / "pred"
    assert main(["infer", "--oracle-gt", "--data", str(data), "--out", str(out)]) == 0
    assert len(list((out / "depth").glob("*.pgm"))) == 12
    assert len(load_poses(out / "trajectory.txt")) == 12
    capsys.readouterr()

    assert main(["eval-odom", "--pred", str(out / "poses_rel.txt"), "--data", str(data)]) == 0
    header, row = capsys.readouterr().out.strip().splitlines()
    vals = dict(zip(header.split(","), row.split(",")))
    assert float(vals["ate_mean"]) == 0 and float(vals["ate_std"]) == 0
    assert float(vals["identity_ate_mean"]) > 0

    assert main(["eval-odom", "--pred", str(out / "trajectory.txt"), "--trajectory", "--data", str(data)]) == 0
    header, row = capsys.readouterr().out.strip().splitlines()
    assert float(dict(zip(header.split(","), row.split(",")))["ate_mean"]) < 1e-9

    csv_path = tmp_path / "depth.csv"
    assert main(["eval-depth", "--pred", str(out / "depth"), "--data", str(data), "--csv", str(csv_path)]) == 0
    header, row = csv_path.read_text().strip().splitlines()
    vals = dict(zip(header.split(","), map(float, row.split(","))))
    assert vals["delta1"] == 1.0 and vals["abs_rel"] < 1e-3

    plot = tmp_path / "plot"
    gt = data / "poses" / "00.txt"
    assert main(["plot", "--poses", str(out / "trajectory.txt"), "--gt", str(gt), "--out", str(plot)]) == 0
    assert "scale 1" in capsys.readouterr().out
    svg = (plot / "trajectory.svg").read_text()
    assert svg.count("<polyline") == 2
    assert len((plot / "trajectory.csv").read_text().splitlines()) == 13


def test_train_infer_resume(data, tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("preset=desk\ninput_h=16\ninput_w=52\nbase_channels=2\ncode_dim=4\nlstm_hidden=4\niterations=2\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    assert main(["train", "--resume", str(run / "ckpt_last.bin"), "--data", str(data), "--out", str(run),
                 "--steps", "2", "--ckpt-every", "1"]) == 0
    assert len((run / "train_log.csv").read_text().splitlines()) == 5
    assert sorted(p.name for p in run.glob("ckpt_0*.bin")) == ["ckpt_000003.bin", "ckpt_000004.bin"]
    out = tmp_path / "pred"
    assert main(["infer", "--ckpt", str(run / "ckpt_last.bin"), "--data", str(data), "--out", str(out)]) == 0
    rel = (out / "poses_rel.txt").read_text().splitlines()
    assert len(rel) == 11
    d = read_depth_pgm(out / "depth" / "000000.pgm")
    assert d.shape == (16, 52) and d.min() > 0


def test_unknown_config_key_exit_1(data, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate=1\n")
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "o")]) == 1
    assert "unknown config key" in capsys.readouterr().err


def test_trajectory_svg_escapes_labels():
    svg = trajectory_svg([("a<b", np.zeros((2, 3)), "red")])
    assert "a&lt;b" in svg and svg.startswith("<svg")
