import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcnraw.gradcheck import check_gradients
from mcnraw.losses import (
    LossWeights,
    MetricsReport,
    multi_granulation_loss,
    psnr,
    reconstruction_loss,
    smoothness_loss,
    ssim,
    total_variation,
)
from mcnraw.mcn import McnOutputs
from mcnraw.tensor import DimensionError, Tensor

from oracles import SSIM_CONST_FROZEN, mean_abs_loops, tv_loops


def outs(*supervised, plain=None):
    """McnOutputs with supervised = given tensors (last one is the back output)."""
    *mids, back = supervised
    plain = plain if plain is not None else Tensor(np.full(back.shape, 123.0))
    return McnOutputs(plain, list(mids), back, [], None)


def rand(shape, seed):
    return np.random.default_rng(seed).random(shape)


# -- reconstruction ---------------------------------------------------------------

def test_recon_zero_when_perfect():
    t = Tensor(rand((1, 3, 8, 8), 0))
    assert reconstruction_loss(outs(t, t), t).data == 0.0


def test_recon_offset_d():
    t = Tensor(rand((1, 3, 8, 8), 0))
    assert reconstruction_loss(outs(t + 0.25, t), t).data == pytest.approx(0.25)


def test_recon_excludes_plain_output():
    t = Tensor(rand((1, 3, 8, 8), 0))
    assert reconstruction_loss(outs(t, t, plain=t + 5.0), t).data == 0.0


def test_recon_matches_elementwise_oracle():
    a, b, t = rand((2, 3, 4, 4), 1), rand((2, 3, 4, 4), 2), rand((2, 3, 4, 4), 3)
    got = reconstruction_loss(outs(Tensor(a), Tensor(b)), Tensor(t)).data
    assert got == pytest.approx(mean_abs_loops(a, t) + mean_abs_loops(b, t), rel=1e-12)


def test_recon_shape_mismatch():
    with pytest.raises(DimensionError):
        reconstruction_loss(outs(Tensor(np.zeros((1, 3, 4, 4)))), Tensor(np.zeros((1, 3, 4, 2))))


# -- smoothness -------------------------------------------------------------------

def test_tv_constant_zero():
    assert total_variation(Tensor(np.full((1, 3, 5, 5), 0.3))).data == 0.0


def test_tv_horizontal_ramp():
    ramp = np.tile(np.arange(6) * 0.1, (1, 1, 4, 1))
    assert total_variation(Tensor(ramp)).data == pytest.approx(0.1)


def test_tv_matches_loops():
    x = rand((2, 3, 5, 7), 4)
    assert total_variation(Tensor(x)).data == pytest.approx(tv_loops(x), rel=1e-12)


def test_tv_degenerate():
    with pytest.raises(DimensionError):
        total_variation(Tensor(np.zeros((1, 3, 1, 5))))


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-5, 5), seed=st.integers(0, 2**16))
def test_smoothness_shift_invariant(c, seed):
    x = Tensor(rand((1, 3, 6, 6), seed))
    a = smoothness_loss(outs(x, x)).data
    b = smoothness_loss(outs(x + c, x)).data
    assert a == pytest.approx(b, rel=1e-9, abs=1e-12)


# -- combined ---------------------------------------------------------------------

def test_combined_zero_on_perfect_constant():
    t = Tensor(np.full((1, 3, 4, 4), 0.5))
    assert multi_granulation_loss(outs(t, t), t).data == 0.0


@settings(max_examples=20, deadline=None)
@given(lr=st.floats(0, 3), ls=st.floats(0, 3), seed=st.integers(0, 2**16))
def test_combined_is_weighted_sum(lr, ls, seed):
    a, b, t = (Tensor(rand((1, 3, 6, 6), seed + k)) for k in range(3))
    o = outs(a, b)
    got = multi_granulation_loss(o, t, LossWeights(lr, ls)).data
    want = lr * reconstruction_loss(o, t).data + ls * smoothness_loss(o).data
    assert got == pytest.approx(want, rel=1e-12, abs=1e-15)


def test_lambda_s_zero_is_recon_only():
    a, t = Tensor(rand((1, 3, 6, 6), 1)), Tensor(rand((1, 3, 6, 6), 2))
    parts = {}
    got = multi_granulation_loss(outs(a), t, LossWeights(1.0, 0.0), parts).data
    assert got == reconstruction_loss(outs(a), t).data == parts["recon"]
    assert parts["smooth"] > 0


def test_loss_weights_non_negative():
    with pytest.raises(ValueError):
        LossWeights(-1, 1)


def test_combined_gradcheck():
    t = Tensor(rand((1, 3, 6, 6), 9))
    b = Tensor(rand((1, 3, 6, 6), 10))

    def graph(x):
        return multi_granulation_loss(outs(x, b), t)

    err = check_gradients(graph, Tensor(rand((1, 3, 6, 6), 11)), eps=1e-7)
    assert err < 1e-4


# -- PSNR ---------------------------------------------------------------------------

def test_psnr_examples():
    a = rand((3, 8, 8), 0)
    assert psnr(a, a) == math.inf
    assert psnr(np.full((3, 4, 4), 0.6), np.full((3, 4, 4), 0.5)) == pytest.approx(20.0, abs=1e-6)
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(0.0, abs=1e-6)


def test_psnr_errors():
    with pytest.raises(DimensionError):
        psnr(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.ones(3), peak=0)


def test_psnr_decreases_with_noise():
    a = rand((3, 16, 16), 0)
    n = np.random.default_rng(1).uniform(-1, 1, a.shape)
    vals = [psnr(a, a + s * n) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


# -- SSIM -----------------------------------------------------------------------------

def test_ssim_identical_is_one():
    a = rand((3, 16, 16), 0)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images():
    assert ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(SSIM_CONST_FROZEN, abs=1e-12)


def test_ssim_too_small():
    with pytest.raises(DimensionError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_ssim_symmetric_and_bounded(seed):
    a, b = rand((2, 14, 14), seed), rand((2, 14, 14), seed + 1)
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= s < 1


def test_ssim_accepts_batched_layout():
    a, b = rand((1, 3, 12, 12), 0), rand((1, 3, 12, 12), 1)
    assert ssim(a, b) == pytest.approx(ssim(a[0], b[0]))


# -- report ---------------------------------------------------------------------------

def test_report_csv_roundtrip(tmp_path):
    rep = MetricsReport()
    rep.add("a", 20.0, 0.5)
    rep.add("b", 30.0, 0.7)
    path = tmp_path / "m.csv"
    rep.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "image_id,psnr_db,ssim"
    assert lines[-1] == "mean,25.000000,0.600000"
    back = MetricsReport.read_csv(path)
    assert back.image_ids == ["a", "b"] and back.mean_psnr == 25.0
