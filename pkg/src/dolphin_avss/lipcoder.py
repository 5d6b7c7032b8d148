"""Dual-path lip video codec with a vector-quantised semantic path.

Video tensors are laid out ``[B, C, T, H, W]`` (grayscale input has ``C = 1``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .numerics import Conv1d, Conv3d, ConfigError, Linear, init_parameters, record_macs, softmax


class SEGate(nn.Module):
    """Frame-wise spatial-softmax pooling followed by a two-layer channel gate."""

    def __init__(self, channels: int):
        super().__init__()
        hidden = max(1, channels // 2)
        self.logits = Conv3d(channels, 1)
        self.fc1 = Linear(channels, hidden)
        self.fc2 = Linear(hidden, channels)

    def forward(self, u):
        b, c, t, h, w = u.shape
        alpha = softmax(self.logits(u).reshape(b, t, h * w), axis=-1)
        context = torch.einsum("btp,bctp->btc", alpha, u.reshape(b, c, t, h * w))
        gate = torch.sigmoid(self.fc2(F.leaky_relu(self.fc1(context))))
        return gate.permute(0, 2, 1)[..., None, None].expand(b, c, t, h, w)


class Res3dBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = Conv3d(channels, channels, (3, 3, 3), padding=(1, 1, 1))
        self.conv2 = Conv3d(channels, channels)
        self.se = SEGate(channels)

    def forward(self, v):
        u = F.elu(self.conv2(F.elu(self.conv1(v))))
        return self.se(u) * u + v


class RMSNorm(nn.Module):
    """RMS normalisation over the last (channel) axis."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(channels))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.gain


class SpatialAttentionBlock(nn.Module):
    """Per-frame self-attention across spatial positions, then a GEGLU feed-forward."""

    def __init__(self, channels: int, heads: int = 8, head_dim: int = 32, expansion: int = 2):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        inner = heads * head_dim
        self.norm1 = RMSNorm(channels)
        self.qkv = Linear(channels, 3 * inner)
        self.proj = Linear(inner, channels)
        self.norm2 = RMSNorm(channels)
        hidden = expansion * channels
        self.expand = Linear(channels, 2 * hidden)
        self.contract = Linear(hidden, channels)
        self.last_weights = None

    def forward(self, v, keep_weights: bool = False):
        b, c, t, h, w = v.shape
        x = v.permute(0, 2, 3, 4, 1).reshape(b, t, h * w, c)
        q, k, val = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        split = lambda y: y.reshape(b, t, h * w, self.heads, self.head_dim).transpose(2, 3)
        q, k, val = split(q), split(k), split(val)
        record_macs("attention", 2 * b * t * self.heads * self.head_dim * (h * w) ** 2)
        weights = softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), axis=-1)
        if keep_weights:
            self.last_weights = weights
        attended = (weights @ val).transpose(2, 3).reshape(b, t, h * w, -1)
        x = x + self.proj(attended)
        a, gate = self.expand(self.norm2(x)).chunk(2, dim=-1)
        x = x + self.contract(a * F.gelu(gate))
        return x.reshape(b, t, h, w, c).permute(0, 4, 1, 2, 3)


def pixel_shuffle_2d(x, factor: int = 2):
    """``[B, C*f*f, T, H, W] -> [B, C, T, H*f, W*f]`` (sub-pixel rearrangement)."""
    b, cff, t, h, w = x.shape
    c = cff // (factor * factor)
    x = x.reshape(b, c, factor, factor, t, h, w)
    return x.permute(0, 1, 4, 5, 2, 6, 3).reshape(b, c, t, h * factor, w * factor)


def _stage_channels(cfg: ModelConfig) -> list[int]:
    return [min(cfg.video_channels * 2**s, cfg.video_max_channels) for s in range(cfg.video_stages + 1)]


class VideoEncoder(nn.Module):
    """Input 7x7x7 conv, then per stage two residual blocks, spatial attention and a stride-2 frame conv."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = _stage_channels(cfg)
        self.stages = cfg.video_stages
        self.stem = Conv3d(1, chans[0], (7, 7, 7), padding=(3, 3, 3))
        self.blocks = nn.ModuleList()
        for s in range(cfg.video_stages):
            self.blocks.append(nn.Sequential(
                Res3dBlock(chans[s]),
                Res3dBlock(chans[s]),
                SpatialAttentionBlock(chans[s], cfg.video_heads, cfg.video_head_dim),
                Conv3d(chans[s], chans[s + 1], (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1)),
            ))
        self.out = Conv3d(chans[-1], cfg.embed_dim)

    def forward(self, video):
        h, w = video.shape[-2:]
        if h % 2**self.stages or w % 2**self.stages:
            raise ConfigError(f"frame size {h}x{w} not divisible by 2^{self.stages}")
        x = self.stem(video)
        for block in self.blocks:
            x = block(x)
        return self.out(x)


class VideoDecoder(nn.Module):
    """Mirror of :class:`VideoEncoder` with sub-pixel upsampling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = _stage_channels(cfg)
        self.inp = Conv3d(cfg.embed_dim, chans[-1])
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for s in range(cfg.video_stages - 1, -1, -1):
            self.ups.append(Conv3d(chans[s + 1], 4 * chans[s], (1, 3, 3), padding=(0, 1, 1)))
            self.blocks.append(nn.Sequential(
                Res3dBlock(chans[s]),
                Res3dBlock(chans[s]),
                SpatialAttentionBlock(chans[s], cfg.video_heads, cfg.video_head_dim),
            ))
        self.out = Conv3d(chans[0], 1, (3, 3, 3), padding=(1, 1, 1))

    def forward(self, z):
        x = self.inp(z)
        for up, block in zip(self.ups, self.blocks):
            x = block(pixel_shuffle_2d(up(x)))
        return self.out(x)


# ---------------------------------------------------------------------------
# Vector quantisation

class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, quantized):
        return quantized.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(z, quantized):
    """Forward value is ``quantized`` bit for bit; the gradient flows to ``z`` unchanged."""
    return _StraightThrough.apply(z, quantized.detach())


@dataclass
class VqResult:
    quantized: torch.Tensor
    indices: torch.Tensor
    commit_loss: torch.Tensor
    codebook_loss: torch.Tensor
    encoder_loss: torch.Tensor


def squared_distances(rows, codebook, chunk: int = 2048):
    out = []
    for start in range(0, rows.shape[0], chunk):
        block = rows[start : start + chunk]
        out.append(((block[:, None, :] - codebook[None, :, :]) ** 2).sum(-1))
    return torch.cat(out) if out else rows.new_zeros((0, codebook.shape[0]))


class VectorQuantizer(nn.Module):
    def __init__(self, size: int = 256, dim: int = 64, beta: float = 1.0):
        super().__init__()
        self.beta = beta
        gen = torch.Generator().manual_seed(0)
        # placeholder entries; training replaces them with k-means centres
        self.codebook = nn.Parameter(torch.randn(size, dim, generator=gen) * 0.1)
        self.register_buffer("usage", torch.zeros(size, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.long))

    def init_from(self, centers) -> None:
        with torch.no_grad():
            self.codebook.copy_(torch.as_tensor(centers, dtype=self.codebook.dtype))
            self.initialized.fill_(1)

    def forward(self, rows, temperature: float = 0.0, generator: torch.Generator | None = None) -> VqResult:
        """Quantise ``rows`` of shape ``[M, dim]``.

        Nearest entry (lowest index on ties) when ``temperature == 0``; otherwise
        the index is drawn from ``softmax(-d^2 / temperature)``.
        """
        cb = self.codebook
        if cb.shape[0] == 0:
            raise ConfigError("empty codebook")
        if rows.shape[-1] != cb.shape[1]:
            raise ConfigError(f"row dim {rows.shape[-1]} != codebook dim {cb.shape[1]}")
        record_macs("vq", rows.shape[0] * cb.shape[0] * cb.shape[1])
        with torch.no_grad():
            dist = squared_distances(rows.detach(), cb.detach())
            if temperature > 0:
                probs = softmax(-dist / temperature, axis=-1)
                idx = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
            else:
                idx = torch.argmin(dist, dim=-1)
            if self.training:
                self.usage += torch.bincount(idx, minlength=cb.shape[0])
        chosen = cb[idx]
        codebook_loss = ((rows.detach() - chosen) ** 2).sum(-1).mean()
        encoder_loss = ((rows - chosen.detach()) ** 2).sum(-1).mean()
        return VqResult(
            quantized=straight_through(rows, chosen),
            indices=idx,
            commit_loss=codebook_loss + self.beta * encoder_loss,
            codebook_loss=codebook_loss,
            encoder_loss=encoder_loss,
        )


def kmeans(points, k: int, restarts: int = 10, seed: int = 0, iters: int = 100, tol: float = 1e-10):
    """Lloyd's k-means with k-means++ seeding; the best-inertia restart wins.

    Returns ``(centers, inertia)``.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        centers = np.empty((k, x.shape[1]))
        centers[0] = x[rng.integers(n)]
        d2 = ((x - centers[0]) ** 2).sum(1)
        for j in range(1, k):
            total = d2.sum()
            pick = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
            centers[j] = x[pick]
            d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(1))
        prev = np.inf
        for _ in range(iters):
            dist = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
            labels = dist.argmin(1)
            inertia = dist[np.arange(n), labels].sum()
            for j in range(k):
                members = x[labels == j]
                centers[j] = members.mean(0) if len(members) else x[rng.integers(n)]
            if prev - inertia <= tol * max(1.0, prev):
                break
            prev = inertia
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        inertia = dist.min(1).sum()
        if inertia < best_inertia:
            best, best_inertia = centers.copy(), inertia
    return best, float(best_inertia)


# ---------------------------------------------------------------------------

def flatten_tokens(z):
    """``[B, d, T, h, w] -> [B, d*h*w, T]``, one token vector per frame."""
    b, d, t, h, w = z.shape
    return z.permute(0, 1, 3, 4, 2).reshape(b, d * h * w, t)


def unflatten_tokens(tokens, dim: int, side: int):
    b, _, t = tokens.shape
    return tokens.reshape(b, dim, side, side, t).permute(0, 1, 4, 2, 3)


def to_rows(z):
    """``[B, d, T, h, w] -> [B*T*h*w, d]``."""
    return z.permute(0, 2, 3, 4, 1).reshape(-1, z.shape[1])


def from_rows(rows, like):
    b, d, t, h, w = like.shape
    return rows.reshape(b, t, h, w, d).permute(0, 4, 1, 2, 3)


class DistillHead(nn.Module):
    """Two pointwise convs from per-frame latent tokens to teacher features."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = Conv1d(in_dim, hidden, 1)
        self.fc2 = Conv1d(hidden, out_dim, 1)

    def forward(self, tokens):
        return self.fc2(F.gelu(self.fc1(tokens)))


class ToyTeacher(nn.Module):
    """Frozen random 3-D conv stack with spatial mean pooling; never trained."""

    def __init__(self, out_dim: int = 32, seed: int = 0, hidden: int = 8):
        super().__init__()
        self.conv1 = Conv3d(1, hidden, (3, 3, 3), padding=(1, 1, 1))
        self.conv2 = Conv3d(hidden, out_dim, (1, 3, 3), padding=(0, 1, 1))
        init_parameters(self, seed)
        gen = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                conv.bias.copy_(torch.rand(conv.bias.shape, generator=gen) * 0.2 - 0.1)
        self.requires_grad_(False)

    def forward(self, video):
        h = self.conv2(torch.tanh(self.conv1(video)))
        return h.mean(dim=(-2, -1))


@dataclass
class LipCoderOutput:
    recon: torch.Tensor | None
    z_e: torch.Tensor
    vq: VqResult
    v_rec: torch.Tensor
    v_sem: torch.Tensor


class DPLipCoder(nn.Module):
    """Reconstruction and semantic path encoders (disjoint weights), VQ, shared decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.side = cfg.video_size // 2**cfg.video_stages
        self.sem_encoder = VideoEncoder(cfg)
        self.rec_encoder = VideoEncoder(cfg) if cfg.reconstruction_path else None
        self.vq = VectorQuantizer(cfg.codebook_size, cfg.embed_dim, cfg.commit_beta)
        self.decoder = VideoDecoder(cfg)
        self.distill = DistillHead(cfg.visual_dim, cfg.distill_hidden, cfg.teacher_dim)

    def forward(self, video, temperature: float = 0.0, decode: bool = True, generator=None) -> LipCoderOutput:
        if video.dim() != 5 or video.shape[1] != 1:
            raise ConfigError(f"expected video [B, 1, T, H, W], got {tuple(video.shape)}")
        z_e = self.sem_encoder(video)
        vq = self.vq(to_rows(z_e), temperature, generator)
        v_s_map = from_rows(vq.quantized, z_e)
        v_r_map = self.rec_encoder(video) if self.rec_encoder is not None else torch.zeros_like(v_s_map)
        recon = self.decoder(v_r_map + v_s_map) if decode else None
        return LipCoderOutput(recon, z_e, vq, flatten_tokens(v_r_map), flatten_tokens(v_s_map))

    @torch.no_grad()
    def tokens(self, video):
        out = self.forward(video, 0.0, decode=False)
        return out.v_rec, out.v_sem

    @torch.no_grad()
    def init_codebook(self, videos, restarts: int = 10, seed: int = 0):
        """k-means on semantic-path features of ``videos`` (called before training)."""
        feats = torch.cat([to_rows(self.sem_encoder(v)) for v in videos]).double().numpy()
        centers, inertia = kmeans(feats, self.vq.codebook.shape[0], restarts, seed)
        self.vq.init_from(centers)
        return inertia


def pretrain_losses(video, out: LipCoderOutput, teacher_out, distill_head, lambda_distill=1.0, lambda_recon=1.0):
    """Commitment + distillation + reconstruction, each mean-reduced."""
    recon = torch.mean((out.recon - video) ** 2) if out.recon is not None else video.new_zeros(())
    distill = torch.mean((distill_head(flatten_tokens(out.z_e)) - teacher_out) ** 2)
    total = out.vq.commit_loss + lambda_distill * distill + lambda_recon * recon
    return {"total": total, "commit": out.vq.commit_loss, "distill": distill, "recon": recon}
