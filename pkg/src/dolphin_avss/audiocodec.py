"""Waveform <-> feature transforms at the model boundary."""
from __future__ import annotations

import torch.nn.functional as F
from torch import nn

from .numerics import Conv1d, ConfigError, TransposedConv1d


class AudioEncoder(nn.Module):
    """Strided conv + ReLU: ``[B, 1, L] -> [B, N, L / stride]``."""

    def __init__(self, channels: int = 256, kernel: int = 16, stride: int = 4):
        super().__init__()
        self.stride = stride
        self.conv = Conv1d(1, channels, kernel, stride=stride, padding=(kernel - stride) // 2)

    def forward(self, wav):
        if wav.shape[-1] % self.stride:
            raise ConfigError(f"waveform length {wav.shape[-1]} not a multiple of {self.stride}")
        return F.relu(self.conv(wav))


class AudioDecoder(nn.Module):
    """Mirror transposed conv: ``[B, N, T] -> [B, 1, T * stride]``."""

    def __init__(self, channels: int = 256, kernel: int = 16, stride: int = 4):
        super().__init__()
        self.conv = TransposedConv1d(channels, 1, kernel, stride=stride, padding=(kernel - stride) // 2)

    def forward(self, feats, length: int | None = None):
        wav = self.conv(feats)
        return wav if length is None else wav[..., :length]
