"""Audio-visual fusion: visual token merging, gated fusion and multi-space attention fusion."""
from __future__ import annotations

import torch.nn.functional as F
from torch import nn

from .numerics import ChannelNorm, Conv1d, ConfigError, interpolate_time, softmax


class VisualFusionNet(nn.Module):
    """Small temporal U-shape over the merged visual tokens."""

    def __init__(self, in_dim: int, hidden: int, out_channels: int, depth: int = 4):
        super().__init__()
        self.proj = Conv1d(in_dim, hidden, 1)
        self.norm = ChannelNorm(hidden)
        self.down = nn.ModuleList(Conv1d(hidden, hidden, 3, stride=2, padding=1, groups=hidden) for _ in range(depth))
        self.up = nn.ModuleList(Conv1d(hidden, hidden, 3, padding=1, groups=hidden) for _ in range(depth))
        self.mix = Conv1d(hidden, hidden, 1)
        self.out = Conv1d(hidden, out_channels, 1)

    def forward(self, tokens):
        h = self.norm(self.proj(tokens))
        skips = [h]
        for down in self.down:
            h = F.silu(down(h))
            skips.append(h)
        for level in range(len(self.down) - 1, -1, -1):
            skip = skips[level]
            h = F.silu(self.up[level](skip + interpolate_time(h, skip.shape[-1], "nearest")))
        return self.out(F.silu(self.mix(h)))


class AudioVisualFusion(nn.Module):
    def __init__(self, visual_dim: int, channels: int, hidden: int = 64, depth: int = 4, subspaces: int = 4):
        super().__init__()
        if subspaces < 1:
            raise ConfigError("need at least one visual subspace")
        self.channels, self.subspaces = channels, subspaces
        self.visual = VisualFusionNet(visual_dim, hidden, channels, depth)
        # 1x1 depthwise maps; w3 expands every channel into K sub-features
        self.w1 = Conv1d(channels, channels, 1, groups=channels)
        self.w2 = Conv1d(channels, channels, 1, groups=channels)
        self.w3 = Conv1d(channels, channels * subspaces, 1, groups=channels)
        self.w4 = Conv1d(channels, channels, 1, groups=channels)

    def merge_tokens(self, v_rec, v_sem):
        if v_rec.shape != v_sem.shape:
            raise ConfigError(f"token shapes differ: {tuple(v_rec.shape)} vs {tuple(v_sem.shape)}")
        return self.visual(v_rec + v_sem)

    def gated(self, visual, audio):
        return interpolate_time(self.w1(visual), audio.shape[-1], "nearest") * self.w2(audio)

    def multispace(self, visual, audio):
        expanded = self.w3(visual)
        # grouped conv output c*K + k belongs to channel c, sub-space k
        sub = expanded.reshape(*expanded.shape[:-2], self.channels, self.subspaces, expanded.shape[-1])
        attn = softmax(sub.mean(dim=-2), axis=-2)
        return interpolate_time(attn, audio.shape[-1], "nearest") * self.w4(audio)

    def forward(self, v_rec, v_sem, audio):
        visual = self.merge_tokens(v_rec, v_sem)
        return self.gated(visual, audio) + self.multispace(visual, audio)
