"""Separation objectives and evaluation metrics.

All ratio metrics take ``[..., L]`` tensors and reduce only the last axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .numerics import EPS_RATIO, stft_mag


@dataclass(frozen=True)
class LossConfig:
    win_len: int = 512
    hop: int = 128
    window: str = "hann"
    eps: float = EPS_RATIO
    base: float = 0.4
    pivot_epoch: int = 80
    decay: float = 0.8
    period: int = 5


def _check_reference(s, name="reference"):
    energy = (s.detach() ** 2).sum(-1)
    if not bool(torch.all(energy > 0)):
        raise ValueError(f"{name} has zero energy")


def _si_ratio(ref, est, eps):
    omega = (est * ref).sum(-1, keepdim=True) / (ref * ref).sum(-1, keepdim=True)
    target = omega * ref
    noise = est - target
    return 10 * torch.log10((target**2).sum(-1) / ((noise**2).sum(-1) + eps))


def sisnr_t(ref, est, eps: float = EPS_RATIO):
    """Scale-invariant SNR in dB of ``est`` against ``ref`` (no mean removal)."""
    _check_reference(ref)
    return _si_ratio(ref, est, eps)


def sisnr_f(ref, est, cfg: LossConfig = LossConfig()):
    """Scale-invariant SNR between vectorised STFT magnitudes."""
    _check_reference(ref)
    m = stft_mag(ref, cfg.win_len, cfg.hop, cfg.window).flatten(-2)
    m_hat = stft_mag(est, cfg.win_len, cfg.hop, cfg.window).flatten(-2)
    if not bool(torch.all((m.detach() ** 2).sum(-1) > 0)):
        raise ValueError("reference spectrum has zero energy")
    return _si_ratio(m, m_hat, cfg.eps)


def lambda_schedule(epoch: int, cfg: LossConfig = LossConfig()) -> float:
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    if epoch <= cfg.pivot_epoch:
        return cfg.base
    return cfg.base * cfg.decay ** ((epoch - cfg.pivot_epoch) // cfg.period)


def total_loss(ref, est, est3=None, epoch: int = 1, cfg: LossConfig = LossConfig(), lam: float | None = None):
    """Negated weighted SI-SNR, averaged over the batch.

    ``lam`` overrides the schedule; ``est3 is None`` means a pure time-domain loss.
    """
    if lam is None:
        lam = lambda_schedule(epoch, cfg)
    time_term = sisnr_t(ref, est, cfg.eps)
    if est3 is None or lam == 0:
        return -time_term.mean()
    return -((1 - lam) * time_term + lam * sisnr_f(ref, est3, cfg)).mean()


def sdr(ref, est, eps: float = EPS_RATIO):
    """Plain signal-to-distortion ratio (not scale invariant)."""
    _check_reference(ref)
    return 10 * torch.log10((ref**2).sum(-1) / (((est - ref) ** 2).sum(-1) + eps))


def sisnri(ref, est, mixture, eps: float = EPS_RATIO):
    return sisnr_t(ref, est, eps) - sisnr_t(ref, mixture, eps)


def sdri(ref, est, mixture, eps: float = EPS_RATIO):
    return sdr(ref, est, eps) - sdr(ref, mixture, eps)

