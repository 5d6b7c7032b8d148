"""Single-pass encoder / bottleneck / decoder separator with top-down injection."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .attention import GABlock
from .config import ModelConfig
from .gla import GLABlock
from .numerics import Conv1d, ConfigError, interpolate_time, pool_time


class GatedInjection(nn.Module):
    """``local * sigmoid(up(W_a g)) + up(W_b g)`` with ``up`` resampling ``g`` to the local length."""

    def __init__(self, channels: int, mode: str = "nearest"):
        super().__init__()
        self.mode = mode
        self.w_gate = Conv1d(channels, channels, 1)
        self.w_add = Conv1d(channels, channels, 1)

    def forward(self, local, guide):
        length = local.shape[-1]
        gate = interpolate_time(self.w_gate(guide), length, self.mode)
        shift = interpolate_time(self.w_add(guide), length, self.mode)
        return local * torch.sigmoid(gate) + shift


class OutputHead(nn.Module):
    """1x1 conv -> GLU -> 1x1 conv. In mask mode the result is a ReLU mask on the mixture features."""

    def __init__(self, channels: int, mask_mode: bool = False):
        super().__init__()
        self.mask_mode = mask_mode
        self.pre = Conv1d(channels, 2 * channels, 1)
        self.post = Conv1d(channels, channels, 1)

    def forward(self, decoded, mixture):
        h = self.post(F.glu(self.pre(decoded), dim=-2))
        if self.mask_mode:
            return F.relu(h) * mixture
        return h


class Separator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n, q = cfg.n_audio, cfg.q_levels

        def gla(level):
            # attention always runs at the coarsest resolution T_a / 2^Q
            return GLABlock(n, cfg.heads, cfg.head_dim, cfg.ffn_hidden, q - level,
                            cfg.disable_ga, cfg.disable_la, cfg.local_op)

        self.encoder = nn.ModuleList(
            nn.Sequential(*[gla(level) for _ in range(cfg.enc_gla)]) for level in range(q + 1)
        )
        self.downsample = nn.ModuleList(
            Conv1d(n, n, 4, stride=2, padding=1, groups=n) for _ in range(q)
        )
        self.top = GABlock(n, cfg.heads, cfg.head_dim, cfg.ffn_hidden, 0)
        self.inject = nn.ModuleList(GatedInjection(n, "nearest") for _ in range(q + 1))
        self.fuse = nn.ModuleList(GatedInjection(n, "linear") for _ in range(q))
        self.decoder = nn.ModuleList(
            nn.Sequential(*[gla(level) for _ in range(cfg.dec_gla)]) for level in range(q + 1)
        )
        self.head = OutputHead(n, cfg.mask_mode)

    def encode(self, feats, visual=None, visual_level: int = 0):
        """Return ``[F_0, ..., F_Q]`` with ``F_q`` of length ``T / 2^q``.

        ``visual`` (full resolution) is pooled and added at ``visual_level`` when
        that level is deeper than the input.
        """
        q = self.cfg.q_levels
        if feats.shape[-1] % 2**q:
            raise ConfigError(f"feature length {feats.shape[-1]} not divisible by 2^{q}")
        levels = []
        h = feats
        for level in range(q + 1):
            if level > 0:
                h = self.downsample[level - 1](h)
                if visual is not None and level == visual_level:
                    h = h + pool_time(visual, 2**level)
            h = self.encoder[level](h)
            levels.append(h)
        return levels

    def bottleneck(self, levels):
        coarse = levels[-1].shape[-1]
        total = sum(pool_time(f, f.shape[-1] // coarse) for f in levels)
        return self.top(total)

    def inject_levels(self, levels, guide):
        return [self.inject[i](f, guide) for i, f in enumerate(levels)]

    def decode(self, injected):
        """Coarsest to finest; returns ``(D_0, D_3)``, ``D_3`` being None when Q < 3."""
        q = self.cfg.q_levels
        state = self.decoder[q](injected[q])
        tap = state if q == 3 else None
        for level in range(q - 1, -1, -1):
            state = self.decoder[level](self.fuse[level](injected[level], state))
            if level == 3:
                tap = state
        return state, tap

    def forward(self, feats, mixture, visual=None, visual_level: int = 0):
        """Returns ``(E, D_3)``. ``iterations > 1`` reuses the same weights."""
        h = feats
        for it in range(self.cfg.iterations):
            levels = self.encode(h if it == 0 else feats + h, visual, visual_level)
            guide = self.bottleneck(levels)
            h, tap = self.decode(self.inject_levels(levels, guide))
        return self.head(h, mixture), tap
