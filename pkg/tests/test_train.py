import math
from dataclasses import replace

import numpy as np
import pytest

from seqvo import losses as L
from seqvo.autodiff import Variable
from seqvo.dataio import synth_scene
from seqvo.networks import NetworkConfig, SeqVONet, init_params
from seqvo.train import (
    NumericalError, OptimState, TrainConfig, adam_step, batch_for_step, checkpoint_load, checkpoint_save,
    forward, lr_at, parse_config, predict_sequence, sgd_step, train, train_step,
)

TINY = NetworkConfig.desk(input_h=16, input_w=48, base_channels=2, code_dim=4, lstm_hidden=4)


@pytest.fixture(scope="module")
def scene():
    return synth_scene(7, 14, height=16, width=48)


def tiny_cfg(**kw):
    return TrainConfig.desk(**kw)


def fresh_net(seed=0):
    return SeqVONet(TINY, init_params(TINY, seed))


def param(value, grad, name="p"):
    p = Variable(np.array(value, dtype=np.float64), requires_grad=True, name=name)
    p.grad = np.array(grad, dtype=np.float64)
    return p


def test_adam_matches_hand_computation():
    lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.99, 1e-8
    p = param([1.0], [0.0])
    st = OptimState()
    theta, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate([0.5, -0.2, 0.3], start=1):
        p.grad = np.array([g])
        adam_step([p], st, lr, wd, b1, b2, eps)
        theta -= lr * wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert p.value[0] == pytest.approx(theta, rel=1e-14)
    assert st.t == 3


def test_adam_first_step_is_lr_sized():
    p = param([0.0, 0.0], [3.0, -0.001])
    adam_step([p], OptimState(), 0.01)
    np.testing.assert_allclose(p.value, [-0.01, 0.01], rtol=1e-4)


def test_adam_decay_only():
    p = param([2.0, -4.0], [0.0, 0.0])
    adam_step([p], OptimState(), 1e-4, 3e-4)
    np.testing.assert_allclose(p.value, np.array([2.0, -4.0]) * (1 - 1e-4 * 3e-4), rtol=1e-15)


def test_adam_skips_params_without_grad():
    p = param([1.0], [0.0])
    p.grad = None
    adam_step([p], OptimState(), 0.1, 0.1)
    assert p.value[0] == 1.0


def test_non_finite_gradient_names_parameter():
    good, bad = param([1.0], [1.0], "gen.a"), param([1.0], [np.nan], "gen.bad")
    with pytest.raises(NumericalError, match="gen.bad"):
        adam_step([good, bad], OptimState(), 0.1)
    assert good.value[0] == 1.0
    with pytest.raises(NumericalError, match="gen.bad"):
        sgd_step([bad], 0.1)


def test_sgd_example():
    p = param([1.0, 2.0], [0.5, -1.0])
    sgd_step([p], 0.1)
    np.testing.assert_allclose(p.value, [0.95, 2.1], rtol=1e-15)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(14_999, cfg) == 1e-4
    assert lr_at(15_000, cfg) == 5e-5
    assert lr_at(30_000, cfg) == 2.5e-5


def test_protocol_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.snippet_len, cfg.weight_decay, cfg.lr0, cfg.lr_halve_every) == (4, 15, 3e-4, 1e-4, 15_000)
    assert (cfg.beta1, cfg.beta2) == (0.9, 0.99)
    assert cfg.iterations == 100_000


def test_short_snippet_rejected_with_tc():
    with pytest.raises(ValueError, match="9"):
        TrainConfig(snippet_len=5)
    TrainConfig(snippet_len=5, weights=L.LossWeights(lambda_t=0.0))


def test_config_round_trip():
    cfg = TrainConfig.desk(seed=3, weights=L.LossWeights(lambda_g=0.0))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_parse_config():
    net, cfg = parse_config("""
        # comment
        preset = desk
        seed = 5
        augment = false
        lambda_g = 0.0
        code_dim = 16
    """)
    assert net.code_dim == 16 and net.input_h == 32
    assert cfg.seed == 5 and cfg.augment is False and cfg.weights.lambda_g == 0.0
    net, cfg = parse_config("preset=full")
    assert (net.input_h, net.input_w, cfg.batch_size) == (128, 416, 4)
    with pytest.raises(ValueError, match="unknown config key"):
        parse_config("bogus=1")
    with pytest.raises(ValueError):
        parse_config("augment=maybe")
    with pytest.raises(ValueError):
        parse_config("no equals sign")


def test_forward_terms_and_total(scene):
    cfg = tiny_cfg()
    res = forward(fresh_net(), batch_for_step(scene, cfg, TINY, 0), cfg)
    t = {k: float(v.value) for k, v in res.report_terms.items()}
    w = cfg.weights
    assert float(res.total.value) == pytest.approx(w.lambda_a * t["ap"] + w.lambda_s * t["smo"] + w.lambda_t * t["tc"] + w.lambda_g * t["g_adv"], rel=1e-5)
    assert t["tc"] == pytest.approx(0, abs=1e-12)  # zero pose heads at init
    assert res.poses.shape == (8 * 2, 6)
    assert res.fake.shape == (16, 3, 16, 48)


def test_batches_deterministic(scene):
    cfg = tiny_cfg()
    a = batch_for_step(scene, cfg, TINY, 4)
    b = batch_for_step(scene, cfg, TINY, 4)
    assert all(np.array_equal(x.images, y.images) for x, y in zip(a, b))


def test_training_bitwise_deterministic(scene):
    cfg = tiny_cfg(iterations=3)
    n1, _, r1 = train(scene, TINY, cfg)
    n2, _, r2 = train(scene, TINY, cfg)
    assert [r.total for r in r1] == [r.total for r in r2]
    assert all(np.array_equal(n1.store[k].value, n2.store[k].value) for k in n1.store)


def test_gan_off_leaves_discriminator_alone(scene):
    cfg = tiny_cfg(weights=L.LossWeights(lambda_g=0.0), d_lr=1.0)
    net = fresh_net()
    before = {k: v.value.copy() for k, v in net.store.items()}
    rep = train_step(net, batch_for_step(scene, cfg, TINY, 0), OptimState(), cfg)
    assert rep.d_adv == 0 and rep.g_adv == 0
    for k, v in net.store.items():
        changed = not np.array_equal(before[k], v.value)
        if k.startswith("disc."):
            assert not changed
    assert any(not np.array_equal(before[k], net.store[k].value) for k in net.store if k.startswith("gen."))


def test_discriminator_update_does_not_touch_generator(scene):
    batch = batch_for_step(scene, tiny_cfg(), TINY, 0)
    stores = []
    for d_lr in (0.0, 0.5):
        net = fresh_net()
        train_step(net, batch, OptimState(), tiny_cfg(d_lr=d_lr))
        stores.append(net.store)
    a, b = stores
    assert all(np.array_equal(a[k].value, b[k].value) for k in a if k.startswith("gen."))
    assert any(not np.array_equal(a[k].value, b[k].value) for k in a if k.startswith("disc."))


def test_non_finite_loss_names_term(scene):
    cfg = tiny_cfg()
    batch = batch_for_step(scene, cfg, TINY, 0)
    batch[0].images[3, 0, 2, 2] = np.nan
    with pytest.raises(NumericalError, match="non-finite loss term"):
        train_step(fresh_net(), batch, OptimState(), cfg)


def test_resume_equivalence(scene, tmp_path):
    cfg = tiny_cfg(iterations=4)
    full, _, rf = train(scene, TINY, cfg)
    _, _, r1 = train(scene, TINY, cfg, out_dir=tmp_path, stop_step=2)
    net, optim, step, cfg2 = checkpoint_load(tmp_path / "ckpt_last.bin")
    assert step == 2 and cfg2 == cfg
    net, _, r2 = train(scene, TINY, cfg2, out_dir=tmp_path, net=net, optim=optim, start_step=step)
    assert [r.total for r in r1 + r2] == [r.total for r in rf]
    assert all(np.array_equal(full.store[k].value, net.store[k].value) for k in full.store)
    lines = (tmp_path / "train_log.csv").read_text().splitlines()
    assert len(lines) == 5 and lines[0].startswith("step,")


def test_checkpoint_round_trip(scene, tmp_path):
    cfg = tiny_cfg(iterations=1)
    net, optim, _ = train(scene, TINY, cfg)
    checkpoint_save(tmp_path / "c.bin", net, optim, 1, cfg)
    net2, optim2, step, cfg2 = checkpoint_load(tmp_path / "c.bin")
    assert step == 1 and optim2.t == optim.t and net2.cfg == TINY and cfg2 == cfg
    for k in net.store:
        assert net.store[k].value.tobytes() == net2.store[k].value.tobytes()
    for k in optim.m:
        assert optim.m[k].tobytes() == optim2.m[k].tobytes()
        assert optim.v[k].tobytes() == optim2.v[k].tobytes()


def test_periodic_checkpoints(scene, tmp_path):
    train(scene, TINY, tiny_cfg(iterations=2, ckpt_every=1), out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.glob("ckpt_*.bin")) == ["ckpt_000001.bin", "ckpt_000002.bin", "ckpt_last.bin"]


@pytest.mark.parametrize("toggle", ["use_code", "use_lstm", "lambda_g", "lambda_t"])
def test_ablations_run(scene, toggle):
    if toggle.startswith("lambda"):
        cfg = tiny_cfg(iterations=2, weights=replace(L.LossWeights(), **{toggle: 0.0}))
    else:
        cfg = tiny_cfg(iterations=2, **{toggle: False})
    _, _, reps = train(scene, TINY, cfg)
    assert all(math.isfinite(r.total) for r in reps)
    if toggle == "lambda_t":
        assert reps[-1].tc == 0


def test_predict_sequence_covers_all_pairs(scene):
    pred = predict_sequence(fresh_net(), scene, snippet_len=5)
    assert len(pred.depths) == len(scene) and len(pred.poses) == len(scene) - 1
    assert all(d.shape == (16, 48) for d in pred.depths)
    assert all(p.shape == (6,) and not p.any() for p in pred.poses)
