import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dolphin_avss.hda import (
    HeatDiffusionAttention, LargeKernelConv, edge_preservation_report, gaussian_conv_reference,
    heat_diffuse, heat_equation_oracle, inverse_softplus,
)
from dolphin_avss.numerics import init_parameters

from conftest import t64


def total_variation(x):
    return (x[..., 1:] - x[..., :-1]).abs().sum(-1)


def test_k_zero_is_identity(rng):
    x = t64(rng.standard_normal((3, 20)))
    assert (heat_diffuse(x, 0.0) - x).abs().max() < 1e-12


def test_large_k_keeps_only_mean():
    np.testing.assert_allclose(heat_diffuse(t64([1, 2, 3, 4]), 1e6).numpy(), [2.5] * 4, atol=1e-4)


def test_impulse_matches_oracle():
    x = np.array([1.0, 0, 0, 0])
    np.testing.assert_allclose(heat_diffuse(t64(x), 0.5).numpy(), heat_equation_oracle(x, 0.5), atol=1e-4)


def test_oracle_examples(rng):
    x = rng.standard_normal(32)
    np.testing.assert_array_equal(heat_equation_oracle(x, 0.0), x)
    np.testing.assert_allclose(heat_equation_oracle(np.full(10, 3.0), 1.7), 3.0, atol=1e-12)
    np.testing.assert_allclose(heat_diffuse(t64(x), 0.3).numpy(), heat_equation_oracle(x, 0.3), atol=1e-3)


def test_negative_k_rejected():
    with pytest.raises(ValueError):
        heat_diffuse(torch.ones(2, 4), -0.1)
    with pytest.raises(ValueError):
        heat_diffuse(torch.ones(2, 4), torch.tensor([0.1, -0.1]))


def test_per_channel_coefficients(rng):
    x = t64(rng.standard_normal((2, 16)))
    both = heat_diffuse(x, torch.tensor([0.1, 2.0], dtype=torch.float64))
    assert torch.allclose(both[0], heat_diffuse(x[0], 0.1))
    assert torch.allclose(both[1], heat_diffuse(x[1], 2.0))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 128), k1=st.floats(0, 5), k2=st.floats(0, 5))
def test_semigroup_and_mean(seed, n, k1, k2):
    x = torch.randn(2, n, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    once = heat_diffuse(x, k1 + k2)
    twice = heat_diffuse(heat_diffuse(x, k1), k2)
    assert (once - twice).abs().max() < 1e-6
    assert (once.mean(-1) - x.mean(-1)).abs().max() < 1e-6


def diffusion_matrix(n, k):
    return heat_diffuse(torch.eye(n, dtype=torch.float64), k)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 128), k=st.floats(2.5, 10.0))
def test_maximum_principle(seed, n, k):
    x = torch.randn(n, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    y = heat_diffuse(x, k)
    assert y.min() >= x.min() - 1e-6 and y.max() <= x.max() + 1e-6


@pytest.mark.parametrize("n", [4, 16, 64, 128])
def test_positivity_threshold(n):
    # Rows sum to one, so bounds hold for every input exactly when no entry is negative.
    # Continuum decay rates make the operator slightly non-positive for short times.
    assert float(diffusion_matrix(n, 2.5).min()) >= -1e-12
    assert float(diffusion_matrix(n, 0.15).min()) < -1e-3
    assert (diffusion_matrix(n, 0.7).sum(0) - 1).abs().max() < 1e-12


def test_maximum_principle_fails_for_small_k_on_rough_signals():
    x = torch.zeros(16, dtype=torch.float64)
    x[8] = 1.0
    assert float(heat_diffuse(x, 0.1).min()) < -1e-3
    assert float(heat_diffuse(x, 2.5).min()) > -1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 96))
def test_total_variation_non_increasing(seed, n):
    x = torch.randn(n, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    tv = [float(total_variation(heat_diffuse(x, k))) for k in np.linspace(0, 3, 13)]
    assert all(b <= a + 1e-9 for a, b in zip(tv, tv[1:]))


def test_gaussian_reference():
    x = np.random.default_rng(0).standard_normal(40)
    np.testing.assert_array_equal(gaussian_conv_reference(x, 0.0, 21), x)
    np.testing.assert_allclose(gaussian_conv_reference(np.full(30, 2.0), 2.0, 21), 2.0, atol=1e-12)
    impulse = np.zeros(41)
    impulse[20] = 1
    taps = np.arange(-10, 11)
    kernel = np.exp(-0.5 * (taps / 2.0) ** 2)
    np.testing.assert_allclose(gaussian_conv_reference(impulse, 2.0, 21)[10:31], kernel / kernel.sum(), atol=1e-12)
    with pytest.raises(ValueError):
        gaussian_conv_reference(x, 1.0, 20)


def _hda(channels=8, k=0.1, seed=0):
    layer = HeatDiffusionAttention(channels, k).double()
    init_parameters(layer, seed)
    return layer


def test_layer_shape_and_k_init():
    layer = _hda(8, 0.1)
    assert layer(torch.randn(2, 8, 32, dtype=torch.float64)).shape == (2, 8, 32)
    assert torch.allclose(layer.k, torch.full((8,), 0.1, dtype=torch.float64))
    assert abs(math.log1p(math.exp(inverse_softplus(0.7))) - 0.7) < 1e-12


def test_closed_gate_gives_bias_response():
    layer = _hda(4)
    with torch.no_grad():
        layer.proj_in.weight.zero_()
        layer.proj_in.bias[4:] = -200.0
        for conv in layer.proj_out:
            if hasattr(conv, "bias"):
                conv.bias.fill_(0.3)
    out = layer(torch.randn(1, 4, 16, dtype=torch.float64))
    zeros = layer.proj_out(torch.zeros(1, 4, 16, dtype=torch.float64))
    assert (out - zeros).abs().max() < 1e-12


def test_disabled_diffusion_reduces_to_gated_input():
    c = 3
    layer = _hda(c)
    z0 = 1.5
    with torch.no_grad():
        layer.k_raw.fill_(-80.0)
        layer.proj_in.weight.zero_()
        layer.proj_in.weight[:c, :, 0] = torch.eye(c, dtype=torch.float64)
        layer.proj_in.bias.zero_()
        layer.proj_in.bias[c:] = z0
        identity = torch.zeros(c, 1, 3, dtype=torch.float64)
        identity[:, 0, 1] = 1
        layer.proj_out[0].weight.copy_(identity)
        layer.proj_out[2].weight.copy_(identity)
        layer.proj_out[3].weight.copy_(torch.eye(c, dtype=torch.float64)[:, :, None])
        for i in (0, 2, 3):
            layer.proj_out[i].bias.zero_()
        layer.proj_out[1] = torch.nn.Identity()
    x = torch.randn(2, c, 10, dtype=torch.float64)
    expected = x * z0 / (1 + math.exp(-z0))
    assert (layer(x) - expected).abs().max() < 1e-10


def test_large_kernel_alternative_shape():
    conv = LargeKernelConv(6)
    assert conv(torch.randn(2, 6, 40)).shape == (2, 6, 40)
    assert sum(p.numel() for p in conv.parameters()) == 6 * 31 + 6


def test_edge_report_structure():
    columns, report = edge_preservation_report(256, 1.2, 1.0, 2.0, 21, 0)
    assert set(columns) == {"position", "input", "heat_diffusion", "gaussian"}
    assert all(len(v) == 256 for v in columns.values())
    assert report["matched_sigma"] is not None
    assert abs(report["gaussian_residual"] - report["heat_residual"]) >= 0
    for key in ("heat_retention", "matched_gaussian_retention"):
        assert 0 < report[key] < 1.5
