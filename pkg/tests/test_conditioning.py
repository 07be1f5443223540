import numpy as np
import pytest

from deflow.autodiff import Tape, Tensor, backward
from deflow.conditioning import (
    ConditionEncoder,
    ConditionSpec,
    bicubic_downsample,
    encode_condition,
    make_condition,
)
from deflow.rng import RandomStream
from helpers import assert_grad_close, fd_gradient


def test_spec_validation():
    with pytest.raises(ValueError, match="down_factor"):
        ConditionSpec(down_factor=3)
    with pytest.raises(ValueError, match="noise_sigma"):
        ConditionSpec(noise_sigma=-0.1)


def test_downsample_constant_image_preserved():
    img = np.full((1, 3, 16, 16), 0.7)
    for f in (2, 4, 8):
        out = bicubic_downsample(img, f)
        assert out.shape == (1, 3, 16 // f, 16 // f)
        assert np.abs(out - 0.7).max() < 1e-12


def test_downsample_factor_one_identity():
    img = np.random.default_rng(0).uniform(size=(1, 1, 8, 8))
    assert np.array_equal(bicubic_downsample(img, 1), img)


def test_downsample_reproduces_linear_ramp_interior():
    h = w = 32
    f = 4
    hh, ww = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = (0.01 * hh + 0.02 * ww + 0.3)[None, None]
    out = bicubic_downsample(img, f)[0, 0]
    # closed form: output o sits at input position f*o + (f-1)/2
    centers = f * np.arange(h // f) + (f - 1) / 2.0
    expect = 0.01 * centers[:, None] + 0.02 * centers[None, :] + 0.3
    interior = slice(2, h // f - 2)
    assert np.abs(out[interior, interior] - expect[interior, interior]).max() < 1e-6


def test_downsample_rejects_nondividing_factor():
    with pytest.raises(ValueError, match="divide"):
        bicubic_downsample(np.zeros((1, 1, 10, 10)), 4)


def test_make_condition_disabled_returns_zeros():
    spec = ConditionSpec(down_factor=4, noise_sigma=0.03, disabled=True)
    out = make_condition(np.ones((2, 3, 16, 16)), spec, RandomStream(0))
    assert out.shape == (2, 3, 4, 4)
    assert np.all(out == 0.0)


def test_make_condition_zero_sigma_is_pure_downsample():
    img = np.random.default_rng(1).uniform(size=(1, 3, 16, 16))
    spec = ConditionSpec(down_factor=2, noise_sigma=0.0)
    out = make_condition(img, spec, RandomStream(0))
    assert np.array_equal(out, bicubic_downsample(img, 2))


def test_make_condition_noise_std_calibrated():
    img = np.zeros((1, 1, 1024, 1024))
    spec = ConditionSpec(down_factor=1, noise_sigma=0.03)
    out = make_condition(img, spec, RandomStream(7))
    assert out.size >= 10 ** 6
    assert abs(out.std() - 0.03) / 0.03 < 0.01


def test_make_condition_bit_reproducible():
    img = np.random.default_rng(2).uniform(size=(2, 3, 8, 8))
    spec = ConditionSpec(down_factor=2, noise_sigma=0.05)
    a = make_condition(img, spec, RandomStream(11))
    b = make_condition(img, spec, RandomStream(11))
    assert np.array_equal(a, b)


def test_encoder_zero_input_zero_features():
    enc = ConditionEncoder(3, 8, RandomStream(0))
    out = enc(Tensor(np.zeros((1, 3, 4, 4))))
    assert np.all(out.data == 0.0)


def test_encode_condition_level_shapes():
    enc = ConditionEncoder(3, 8, RandomStream(1))
    raw = np.random.default_rng(3).normal(size=(2, 3, 4, 4))
    feats = encode_condition(raw, enc, [(8, 8), (4, 4)])
    assert feats[0].shape == (2, 8, 8, 8)
    assert feats[1].shape == (2, 8, 4, 4)


def test_gradient_flows_through_encoder():
    enc = ConditionEncoder(2, 4, RandomStream(2))
    raw = np.random.default_rng(4).normal(size=(1, 2, 4, 4))
    w = np.linspace(0.5, 1.5, 4 * 4 * 4).reshape(1, 4, 4, 4)

    def value(kernel):
        enc.kernel2.data[...] = kernel
        out = enc(Tensor(raw))
        return float((out.data * w).sum())

    k0 = enc.kernel2.data.copy()
    with Tape():
        loss = (enc(Tensor(raw)) * Tensor(w)).sum()
        backward(loss)
    fd = fd_gradient(value, k0.copy())
    value(k0)  # restore
    assert_grad_close(enc.kernel2.grad, fd, rtol=1e-4, label="encoder kernel")


def test_domain_invariance_proxy_white_noise():
    # paired clean/degraded with sigma=0.04 white noise; at down factor 4 the
    # conditioning residual stays below twice the conditioning noise sigma
    stream = RandomStream(31)
    x = 0.5 + 0.1 * np.sin(np.arange(64 * 64).reshape(1, 1, 64, 64) / 17.0)
    y = x + stream.spawn("deg").normal(x.shape, std=0.04)
    spec = ConditionSpec(down_factor=4, noise_sigma=0.03)
    hx = make_condition(x, spec, stream.spawn("hx"))
    hy = make_condition(y, spec, stream.spawn("hy"))
    mean_gap = np.abs(hx - hy).mean()
    assert mean_gap <= 2.0 * spec.noise_sigma  # threshold for this corpus
