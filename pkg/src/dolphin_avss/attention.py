"""Multi-head self-attention over time, coarse (pooled) attention, conv FFN, GA block."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import ChannelNorm, Conv1d, ConfigError, interpolate_time, pool_time, record_macs, softmax


def attention_core_macs(batch: int, heads: int, head_dim: int, length: int) -> int:
    """Score (QK^T) plus weighted-sum (AV) products."""
    return 2 * batch * heads * head_dim * length * length


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product attention across the time axis; no positional encoding."""

    def __init__(self, channels: int, heads: int = 8, head_dim: int = 128):
        super().__init__()
        self.channels, self.heads, self.head_dim = channels, heads, head_dim
        inner = heads * head_dim
        self.w_q = Conv1d(channels, inner, 1)
        self.w_k = Conv1d(channels, inner, 1)
        self.w_v = Conv1d(channels, inner, 1)
        self.w_o = Conv1d(inner, channels, 1)
        self.last_weights: torch.Tensor | None = None

    def _split(self, x):
        # [..., H*dh, T] -> [..., H, T, dh]
        return x.reshape(*x.shape[:-2], self.heads, self.head_dim, x.shape[-1]).transpose(-1, -2)

    def forward(self, x, keep_weights: bool = False):
        if x.shape[-2] != self.channels:
            raise ConfigError(f"expected {self.channels} channels, got {x.shape[-2]}")
        q, k, v = self._split(self.w_q(x)), self._split(self.w_k(x)), self._split(self.w_v(x))
        length = x.shape[-1]
        batch = int(math.prod(x.shape[:-2]))
        record_macs("attention", attention_core_macs(batch, self.heads, self.head_dim, length))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        weights = softmax(scores, axis=-1)
        if keep_weights:
            self.last_weights = weights
        out = (weights @ v).transpose(-1, -2)
        out = out.reshape(*x.shape[:-2], self.heads * self.head_dim, length)
        return self.w_o(out)


class CoarseSelfAttention(nn.Module):
    """Pool by ``2**levels``, attend, interpolate back (linear) and add the input."""

    def __init__(self, channels: int, heads: int, head_dim: int, levels: int):
        super().__init__()
        self.levels = levels
        self.norm = ChannelNorm(channels)
        self.mhsa = MultiHeadSelfAttention(channels, heads, head_dim)

    def forward(self, x):
        factor = 2**self.levels
        length = x.shape[-1]
        if length < factor:
            raise ConfigError(f"sequence of {length} steps cannot be pooled by {factor}")
        y = self.mhsa(pool_time(self.norm(x), factor))
        return x + interpolate_time(y, length, "linear")


class ConvFFN(nn.Module):
    """norm -> pointwise expand -> SiLU -> depthwise k3 -> SiLU -> pointwise contract, residual."""

    def __init__(self, channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        if hidden < channels:
            raise ConfigError(f"FFN width {hidden} smaller than model width {channels}")
        self.norm = ChannelNorm(channels)
        self.expand = Conv1d(channels, hidden, 1)
        self.depthwise = Conv1d(hidden, hidden, kernel, padding=kernel // 2, groups=hidden)
        self.contract = Conv1d(hidden, channels, 1)

    def forward(self, x):
        h = F.silu(self.expand(self.norm(x)))
        h = F.silu(self.depthwise(h))
        return x + self.contract(h)


class GABlock(nn.Module):
    """Global attention: coarse self-attention followed by the conv FFN."""

    def __init__(self, channels: int, heads: int, head_dim: int, hidden: int, levels: int):
        super().__init__()
        self.csa = CoarseSelfAttention(channels, heads, head_dim, levels)
        self.ffn = ConvFFN(channels, hidden)

    def forward(self, x):
        return self.ffn(self.csa(x))
