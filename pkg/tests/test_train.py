import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcnraw import mcnt
from mcnraw.raw import pack_bayer, unpack_bayer
from mcnraw.synth import make_pair
from mcnraw.tensor import NumericError, Tensor
from mcnraw.train import (
    AdamState,
    TrainConfig,
    adam_step,
    augment_pair,
    deaugment,
    learning_rate,
    load_training_state,
    make_sample,
    read_log,
    train_loop,
)

from oracles import adam_scalar


# -- Adam ---------------------------------------------------------------------------

def test_adam_first_step_is_sign():
    g = np.array([3.0, -0.02, 1e-3, -50.0])
    p = {"w": Tensor(np.zeros(4))}
    adam_step(p, {"w": g}, AdamState(), 0.01)
    np.testing.assert_allclose(p["w"].data, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_zero_gradient_keeps_params():
    w = np.random.default_rng(0).random(5)
    p = {"w": Tensor(w.copy())}
    st_ = AdamState()
    for _ in range(3):
        adam_step(p, {"w": np.zeros(5)}, st_, 0.1)
    np.testing.assert_array_equal(p["w"].data, w)
    assert st_.t == 3


def test_adam_quadratic_trajectory():
    # f = 0.5 * a * (theta - c)^2
    a, c, lr = 3.0, 0.7, 0.05
    p = {"w": Tensor(np.array([2.0]))}
    state = AdamState()
    got = []
    for _ in range(10):
        adam_step(p, {"w": a * (p["w"].data - c)}, state, lr)
        got.append(p["w"].data[0])
    want = adam_scalar(2.0, lambda th: a * (th - c), lr, 10)
    np.testing.assert_allclose(got, want, rtol=1e-7)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), steps=st.integers(1, 5))
def test_adam_odd_symmetry(seed, steps):
    rng = np.random.default_rng(seed)
    w0 = rng.normal(size=6)
    grads = [rng.normal(size=6) for _ in range(steps)]
    pa, pb = {"w": Tensor(w0.copy())}, {"w": Tensor(-w0)}
    sa, sb = AdamState(), AdamState()
    for g in grads:
        adam_step(pa, {"w": g}, sa, 0.01)
        adam_step(pb, {"w": -g}, sb, 0.01)
    np.testing.assert_allclose(pb["w"].data, -pa["w"].data, rtol=0, atol=1e-15)


def test_adam_rejects_non_finite_and_bad_lr():
    p = {"w": Tensor(np.zeros(3))}
    with pytest.raises(NumericError, match="w"):
        adam_step(p, {"w": np.array([0.0, np.nan, 1.0])}, AdamState(), 0.1)
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(3)}, AdamState(), 0.0)


# -- schedule -----------------------------------------------------------------------

def test_learning_rate_schedule():
    cfg = TrainConfig()
    assert learning_rate(0, cfg) == 1e-4
    assert learning_rate(1999, cfg) == 1e-4
    assert learning_rate(2000, cfg) == 1e-5
    assert learning_rate(3999, cfg) == 1e-5


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(crop=50)
    with pytest.raises(ValueError):
        TrainConfig(crop=36, cfa="xtrans")


def test_config_file_roundtrip(tmp_path):
    cfg = TrainConfig(steps=7, lr_initial=3e-3, n_sgn=2, fusion="dense", lambda_s=0.5,
                      augment=False, manifest="data/m.txt", crop=64, width_divisor=4)
    cfg.to_file(tmp_path / "c.ini")
    assert TrainConfig.from_file(tmp_path / "c.ini") == cfg
    assert TrainConfig.from_file(tmp_path / "c.ini", steps=9).steps == 9


def test_config_unknown_key(tmp_path):
    (tmp_path / "c.ini").write_text("[train]\nlearning_speed = 3\n")
    with pytest.raises(ValueError, match="learning_speed"):
        TrainConfig.from_file(tmp_path / "c.ini")


# -- augmentation -------------------------------------------------------------------

def _pair(seed=0, h=8, w=10):
    rng = np.random.default_rng(seed)
    target = rng.random((1, 3, 2 * h, 2 * w))
    mosaic = rng.random((2 * h, 2 * w))
    return pack_bayer(mosaic).data, target, mosaic


def test_augment_identity_windows_align():
    p, t, _ = _pair()
    pin, tin, aug = augment_pair(p, t, 4, np.random.default_rng(1), enabled=False)
    assert (aug.flip_h, aug.flip_v, aug.rot) == (False, False, 0)
    np.testing.assert_array_equal(pin, p[..., aug.y:aug.y + 4, aug.x:aug.x + 4])
    np.testing.assert_array_equal(tin, t[..., 2 * aug.y:2 * aug.y + 8, 2 * aug.x:2 * aug.x + 8])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_deaugment_recovers_windows(seed):
    p, t, _ = _pair(seed % 7)
    pin, tin, aug = augment_pair(p, t, 4, np.random.default_rng(seed))
    bp, bt = deaugment(pin, tin, aug)
    np.testing.assert_array_equal(bp, p[..., aug.y:aug.y + 4, aug.x:aug.x + 4])
    np.testing.assert_array_equal(bt, t[..., 2 * aug.y:2 * aug.y + 8, 2 * aug.x:2 * aug.x + 8])


def test_flip_keeps_pixel_correspondence():
    # a packed channel pixel and the target pixel at its unpacked site move together
    p, t, mosaic = _pair(3)
    t = np.broadcast_to(mosaic, t.shape).copy()  # target carries mosaic values at every site
    for seed in range(20):
        pin, tin, aug = augment_pair(p, t, 4, np.random.default_rng(seed))
        bp, bt = deaugment(pin, tin, aug)
        np.testing.assert_array_equal(unpack_bayer(bp).data, bt[0, 0])


def test_same_seed_same_crop():
    p, t, _ = _pair()
    a = augment_pair(p, t, 4, np.random.default_rng(5))
    b = augment_pair(p, t, 4, np.random.default_rng(5))
    assert a[2] == b[2]
    np.testing.assert_array_equal(a[0], b[0])


def test_crop_too_large():
    p, t, _ = _pair()
    with pytest.raises(ValueError):
        augment_pair(p, t, 9, np.random.default_rng(0))


# -- training loop -------------------------------------------------------------------

def tiny_cfg(**kw):
    base = dict(steps=6, lr_initial=1e-3, lr_late=1e-3, crop=32, n_sgn=2, width_divisor=8,
                seed=0, checkpoint_every=1)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    out = []
    for i in range(2):
        p = make_pair(i, 32, ratio=100.0)
        out.append(make_sample(p.raw_short, p.ground_truth, f"p{i}"))
    return out


def test_dataset_must_not_be_empty():
    with pytest.raises(ValueError):
        train_loop(tiny_cfg(), [])


def test_log_rows_and_checkpoints(tmp_path, tiny_data):
    res = train_loop(tiny_cfg(), tiny_data, tmp_path)
    assert [r["step"] for r in res.log] == list(range(1, 7))
    assert [r["epoch"] for r in res.log] == [0, 0, 1, 1, 2, 2]
    rows = read_log(tmp_path / "train_log.csv")
    assert [r["loss"] for r in rows] == [r["loss"] for r in res.log]
    names = sorted(p.name for p in tmp_path.glob("*.mcnc"))
    assert names == ["ckpt_epoch00001.mcnc", "ckpt_epoch00002.mcnc", "final.mcnc"]
    tensors = mcnt.load_checkpoint(tmp_path / "final.mcnc")
    assert tensors["adam.t"][0] == 6 and tensors["train.step"][0] == 6


def test_resume_matches_uninterrupted(tmp_path, tiny_data):
    full = train_loop(tiny_cfg(), tiny_data, tmp_path / "a")
    resumed = train_loop(tiny_cfg(), tiny_data, tmp_path / "b", resume=tmp_path / "a" / "ckpt_epoch00001.mcnc")
    assert [r["loss"] for r in resumed.log] == [r["loss"] for r in full.log[2:]]
    a = mcnt.load_checkpoint(tmp_path / "a" / "final.mcnc")
    b = mcnt.load_checkpoint(tmp_path / "b" / "final.mcnc")
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_two_runs_bit_identical(tmp_path, tiny_data):
    train_loop(tiny_cfg(), tiny_data, tmp_path / "a")
    train_loop(tiny_cfg(), tiny_data, tmp_path / "b")
    for name in ("final.mcnc", "train_log.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_state_restores_moments(tmp_path, tiny_data):
    res = train_loop(tiny_cfg(steps=2), tiny_data, tmp_path)
    model = type(res.model)(res.model.config, seed=99)
    state, step = load_training_state(tmp_path / "final.mcnc", model)
    assert step == 2 and state.t == 2
    for k, v in res.state.m.items():
        np.testing.assert_array_equal(state.m[k], v.astype(np.float32))


def test_non_finite_loss_dumps_state(tmp_path, tiny_data):
    bad = [type(tiny_data[0])(tiny_data[0].packed, np.full_like(tiny_data[0].target, np.nan), "nan")]
    with pytest.raises(NumericError, match="step 1"):
        train_loop(tiny_cfg(), bad, tmp_path)
    assert (tmp_path / "nonfinite.mcnc").exists()


def test_overfit_single_pair_loss_drops():
    p = make_pair(3, 64, ratio=100.0)
    cfg = TrainConfig(steps=500, lr_initial=1e-3, lr_late=1e-3, crop=64, n_sgn=2, width_divisor=8,
                      augment=False, seed=0)
    res = train_loop(cfg, [make_sample(p.raw_short, p.ground_truth)])
    losses = [r["loss"] for r in res.log]
    assert np.all(np.isfinite(losses))
    assert losses[-1] < 0.3 * losses[0]
