import pytest
import torch
from hypothesis import given, settings, strategies as st

from dolphin_avss.audiocodec import AudioDecoder, AudioEncoder
from dolphin_avss.numerics import ConfigError, Conv1d, init_parameters
from dolphin_avss.profiler import count_params


def test_full_scale_lengths_and_params():
    enc, dec = AudioEncoder(), AudioDecoder()
    x = enc(torch.zeros(1, 1, 16000))
    assert x.shape == (1, 256, 4000)
    assert dec(torch.zeros(1, 256, 4000)).shape == (1, 1, 16000)
    assert count_params(enc) == 4352
    assert count_params(Conv1d(8, 16, 1)) == 144
    assert count_params(torch.nn.Module()) == 0


def test_zero_inputs_give_bias_responses():
    enc = init_parameters(AudioEncoder(8), 0)
    with torch.no_grad():
        enc.conv.bias.normal_()
    out = enc(torch.zeros(1, 1, 64))
    assert torch.equal(out, torch.relu(enc.conv.bias)[None, :, None].expand(1, 8, 16))
    dec = init_parameters(AudioDecoder(8), 0)
    with torch.no_grad():
        dec.conv.bias.fill_(0.25)
    assert torch.equal(dec(torch.zeros(1, 8, 16)), torch.full((1, 1, 64), 0.25))


def test_rejects_unpadded_length():
    with pytest.raises(ConfigError):
        AudioEncoder(4)(torch.zeros(1, 1, 10))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 200))
def test_round_trip_shapes(n):
    enc, dec = AudioEncoder(4), AudioDecoder(4)
    wav = torch.randn(2, 1, 4 * n)
    assert dec(enc(wav)).shape == wav.shape
    assert dec(enc(wav), 4 * n - 3).shape[-1] == 4 * n - 3
