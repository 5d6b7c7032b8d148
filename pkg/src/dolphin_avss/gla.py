"""Local attention (LA) block and the composite global-local attention (GLA) block."""
from __future__ import annotations

from torch import nn

from .attention import ConvFFN, GABlock
from .hda import HeatDiffusionAttention, LargeKernelConv
from .numerics import ChannelNorm, Conv1d


class DepthwiseResidual(nn.Module):
    """Single depthwise k3 conv with residual add; stands in for a removed sub-block."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = Conv1d(channels, channels, 3, padding=1, groups=channels)

    def forward(self, x):
        return x + self.conv(x)


class LABlock(nn.Module):
    def __init__(self, channels: int, hidden: int, local_op: str = "hda", k_init: float = 0.1):
        super().__init__()
        self.norm = ChannelNorm(channels)
        if local_op == "hda":
            self.local = HeatDiffusionAttention(channels, k_init)
        elif local_op == "conv":
            self.local = LargeKernelConv(channels)
        else:
            raise ValueError(f"unknown local operator {local_op!r}")
        self.ffn = ConvFFN(channels, hidden)

    def forward(self, x):
        return self.ffn(x + self.local(self.norm(x)))


class GLABlock(nn.Module):
    """GA block then LA block; either may be swapped for a depthwise conv."""

    def __init__(self, channels: int, heads: int, head_dim: int, hidden: int, levels: int,
                 disable_ga: bool = False, disable_la: bool = False, local_op: str = "hda"):
        super().__init__()
        self.disable_ga, self.disable_la = disable_ga, disable_la
        self.ga = DepthwiseResidual(channels) if disable_ga else GABlock(channels, heads, head_dim, hidden, levels)
        self.la = DepthwiseResidual(channels) if disable_la else LABlock(channels, hidden, local_op)

    def forward(self, x):
        return self.la(self.ga(x))
