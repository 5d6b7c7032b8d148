import math

import numpy as np
import pytest
import scipy.fft
import scipy.signal
import torch
from hypothesis import given, settings, strategies as st

from dolphin_avss.numerics import (
    ConfigError, Conv1d, ConvSpec, TransposedConv1d, conv1d, counting_macs, dct2, dct_matrix, grad_check,
    idct2, init_parameters, interpolate_time, layer_norm_channels, pool_time, relative_error, softmax,
    stft_mag, transposed_conv1d,
)
from dolphin_avss.hda import heat_diffuse

from conftest import t64


# ---- convolution ---------------------------------------------------------

def test_identity_kernel_is_identity():
    x = torch.randn(3, 1, 17, dtype=torch.float64)
    spec = ConvSpec(1, 1, 1)
    assert torch.equal(conv1d(x, spec, torch.ones(1, 1, 1, dtype=torch.float64)), x)


def test_hand_convolution():
    y = conv1d(t64([[1.0, 2.0, 3.0]]), ConvSpec(1, 1, 2), t64([[[1.0, 1.0]]]))
    assert y.tolist() == [[3.0, 5.0]]


def test_encoder_output_length():
    spec = ConvSpec(1, 256, 16, stride=4, padding=6)
    assert spec.out_length(16000) == 4000
    assert spec.transposed_out_length(4000) == 16000


def test_transposed_hand_expansion():
    y = transposed_conv1d(t64([[1.0, 0.0]]), ConvSpec(1, 1, 2, stride=2), t64([[[1.0, 1.0]]]))
    assert y.tolist() == [[1.0, 1.0, 0.0, 0.0]]
    x = torch.randn(2, 5, dtype=torch.float64)
    assert torch.equal(transposed_conv1d(x[:1], ConvSpec(1, 1, 1), torch.ones(1, 1, 1, dtype=torch.float64)), x[:1])


def test_conv_matches_scipy_correlation(rng):
    x, w = rng.standard_normal(50), rng.standard_normal(5)
    y = conv1d(t64(x[None]), ConvSpec(1, 1, 5, padding=2), t64(w[None, None]))
    ref = scipy.signal.correlate(np.pad(x, 2), w, mode="valid")
    np.testing.assert_allclose(y[0].numpy(), ref, atol=1e-12)


def test_conv_spec_errors():
    with pytest.raises(ConfigError):
        ConvSpec(3, 4, 3, groups=2)
    with pytest.raises(ConfigError):
        ConvSpec(2, 2, 0)
    with pytest.raises(ConfigError):
        conv1d(torch.randn(2, 10), ConvSpec(3, 3, 3), torch.randn(3, 3, 3))
    with pytest.raises(ConfigError):
        conv1d(torch.randn(1, 2), ConvSpec(1, 1, 5), torch.randn(1, 1, 5))


def test_conv_macs_formula():
    conv = Conv1d(2, 3, 4)
    with counting_macs() as c:
        y = conv(torch.zeros(1, 2, 13))
    assert y.shape[-1] == 10
    assert c.by_tag["conv"] == 240


def test_depthwise_and_pointwise_shapes():
    x = torch.randn(2, 6, 20)
    assert Conv1d(6, 6, 3, padding=1, groups=6)(x).shape == (2, 6, 20)
    assert Conv1d(6, 12, 1)(x).shape == (2, 12, 20)
    assert TransposedConv1d(6, 1, 16, stride=4, padding=6)(torch.randn(2, 6, 25)).shape == (2, 1, 100)


def test_init_is_seeded_and_bounded():
    a, b = Conv1d(4, 8, 3), Conv1d(4, 8, 3)
    init_parameters(a, 7)
    init_parameters(b, 7)
    assert torch.equal(a.weight, b.weight)
    assert a.weight.abs().max() <= math.sqrt(1 / 12)
    assert torch.count_nonzero(a.bias) == 0


# ---- DCT -----------------------------------------------------------------

def test_dct_examples():
    np.testing.assert_allclose(dct2(t64([1, 1, 1, 1])).numpy(), [2, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(dct2(t64([1, 0])).numpy(), [0.70710678, 0.70710678], atol=1e-8)
    np.testing.assert_allclose(idct2(t64([2, 0, 0, 0])).numpy(), [1, 1, 1, 1], atol=1e-12)
    basis = idct2(t64([0, 1, 0, 0])).numpy()
    t = np.arange(4)
    np.testing.assert_allclose(basis, math.sqrt(2 / 4) * np.cos(np.pi * (t + 0.5) / 4), atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 7, 64, 255, 256, 257, 300, 512])
def test_dct_matches_scipy(n, rng):
    x = rng.standard_normal((3, n))
    ref = scipy.fft.dct(x, type=2, norm="ortho", axis=-1)
    np.testing.assert_allclose(dct2(t64(x)).numpy(), ref, atol=1e-12)
    np.testing.assert_allclose(idct2(t64(ref)).numpy(), x, atol=1e-12)


@pytest.mark.parametrize("n", [5, 64, 257, 511])
def test_fft_path_matches_direct(n, rng):
    x = t64(rng.standard_normal((2, n)))
    assert (dct2(x, "fft") - dct2(x, "direct")).abs().max() < 1e-6
    assert (idct2(x, "fft") - idct2(x, "direct")).abs().max() < 1e-6


def test_dct_matrix_orthonormal():
    m = dct_matrix(17)
    assert (m @ m.T - torch.eye(17, dtype=m.dtype)).abs().max() < 1e-13


def test_round_trip_32bit_t257():
    x = torch.randn(4, 257)
    assert (idct2(dct2(x)) - x).abs().max() < 1e-5


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 512), seed=st.integers(0, 2**31 - 1))
def test_round_trip_and_parseval_property(n, seed):
    x = torch.randn(2, n, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    coef = dct2(x)
    assert (idct2(coef) - x).abs().max() < 1e-12
    assert abs(float(coef.pow(2).sum() - x.pow(2).sum())) / float(x.pow(2).sum()) < 1e-6
    x32 = x.float()
    assert (idct2(dct2(x32)) - x32).abs().max() < 1e-5


# ---- STFT ----------------------------------------------------------------

def test_stft_shapes_and_zero():
    mag = stft_mag(torch.zeros(16000))
    assert mag.shape == (257, 122)
    assert torch.count_nonzero(mag) == 0
    with pytest.raises(ValueError):
        stft_mag(torch.zeros(100))


def test_stft_bin_centred_sinusoid():
    n, bin_ = 512, 37
    s = torch.cos(2 * math.pi * bin_ * torch.arange(2048, dtype=torch.float64) / n)
    mag = stft_mag(s, n, 128, "rect")
    energy = mag.pow(2).sum(-1)
    assert int(energy.argmax()) == bin_
    assert float(energy[bin_] / energy.sum()) > 0.999


def test_stft_matches_scipy(rng):
    s = rng.standard_normal(3000)
    _, _, z = scipy.signal.stft(s, window="hann", nperseg=512, noverlap=384, boundary=None, padded=False,
                                detrend=False, scaling="spectrum")
    win = scipy.signal.get_window("hann", 512)
    ref = np.abs(z) * win.sum()
    np.testing.assert_allclose(stft_mag(t64(s)).numpy(), ref, rtol=1e-9, atol=1e-9)


# ---- resampling, pooling, softmax, norm ------------------------------------

def test_interpolation_examples():
    x = t64([[0.0, 2.0]])
    np.testing.assert_allclose(interpolate_time(x, 4, "linear").numpy(), [[0, 2 / 3, 4 / 3, 2]], atol=1e-12)
    assert interpolate_time(t64([[5.0]]), 3, "nearest").tolist() == [[5.0, 5.0, 5.0]]
    y = torch.randn(3, 9)
    assert torch.equal(interpolate_time(y, 9, "linear"), y)
    assert torch.equal(interpolate_time(y, 9, "nearest"), y)
    with pytest.raises(ConfigError):
        interpolate_time(y, 0)


def test_linear_interpolation_is_affine(rng):
    a, b = t64(rng.standard_normal((2, 7))), t64(rng.standard_normal((2, 7)))
    lhs = interpolate_time(2 * a + 3 * b, 20, "linear")
    rhs = 2 * interpolate_time(a, 20, "linear") + 3 * interpolate_time(b, 20, "linear")
    assert (lhs - rhs).abs().max() < 1e-12


def test_pool_examples():
    assert pool_time(t64([[1, 3, 5, 7]]), 2).tolist() == [[2.0, 6.0]]
    x = torch.randn(2, 8)
    assert torch.equal(pool_time(x, 1), x)
    assert torch.allclose(pool_time(torch.full((1, 12), 3.0), 4), torch.full((1, 3), 3.0))
    # edge padding of the tail
    assert pool_time(t64([[1, 3, 5]]), 2).tolist() == [[2.0, 5.0]]


def test_softmax_examples():
    assert softmax(t64([0.0, 0.0])).tolist() == [0.5, 0.5]
    np.testing.assert_allclose(softmax(t64([0.0, math.log(3)])).numpy(), [0.25, 0.75], atol=1e-12)
    big = t64([1000.0, 1001.0])
    assert torch.isfinite(softmax(big)).all()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(-100, 100))
def test_softmax_properties(values, shift):
    x = t64(values)
    p = softmax(x)
    assert abs(float(p.sum()) - 1) < 1e-6
    assert (p >= 0).all() and (p <= 1).all()
    assert (softmax(x + shift) - p).abs().max() < 1e-9


def test_layer_norm_examples():
    np.testing.assert_allclose(layer_norm_channels(t64([[1.0], [3.0]]), eps=0).numpy(), [[-1.0], [1.0]])
    assert layer_norm_channels(torch.full((4, 6), 2.5)).abs().max() == 0
    x = torch.randn(5, 11, dtype=torch.float64)
    y = layer_norm_channels(x)
    assert y.mean(0).abs().max() < 1e-6
    assert (layer_norm_channels(3 * x + 2, eps=0) - layer_norm_channels(x, eps=0)).abs().max() < 1e-12


# ---- gradient checker ----------------------------------------------------

def test_relative_error_definition():
    assert relative_error(1.0, 1.0) == 0
    assert relative_error(2.0, 1.0) == 0.5
    assert relative_error(0.0, 1e-9) == pytest.approx(0.1)


def test_grad_check_conv_sum():
    conv = Conv1d(3, 4, 3, padding=1).double()
    init_parameters(conv, 0)
    x = torch.randn(2, 3, 10, dtype=torch.float64)
    report = grad_check(lambda: conv(x).pow(2).sum(), {"weight": conv.weight, "bias": conv.bias}, tol=1e-5)
    assert report.passed, report


def test_grad_check_heat_k():
    x = torch.randn(3, 16, dtype=torch.float64)
    k = torch.tensor([0.2, 0.5, 1.0], dtype=torch.float64, requires_grad=True)
    w = torch.randn(3, 16, dtype=torch.float64)
    report = grad_check(lambda: (heat_diffuse(x, k) * w).sum(), {"k": k}, tol=1e-5)
    assert report.passed, report


def test_grad_check_flags_wrong_gradient():
    p = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)

    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x.pow(2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(2, dtype=torch.float64)

    report = grad_check(lambda: Wrong.apply(p), {"p": p})
    assert not report.passed


def test_grad_check_frozen_slot_is_zero():
    p = torch.ones(3, dtype=torch.float64, requires_grad=True)
    frozen = torch.ones(3, dtype=torch.float64)
    report = grad_check(lambda: (p * frozen).sum(), {"p": p, "frozen": frozen})
    assert report.per_parameter_errors["frozen"] == 0
    with pytest.raises(ConfigError):
        grad_check(lambda: p.sum(), {"p": torch.ones(2, requires_grad=True)})


def test_kernels_bit_deterministic():
    x = torch.randn(2, 4, 300)
    conv = init_parameters(Conv1d(4, 4, 5, padding=2), 3)
    assert torch.equal(conv(x), conv(x))
    assert torch.equal(dct2(x), dct2(x))
