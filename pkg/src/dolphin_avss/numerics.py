"""Core numerical kernels shared by every layer.

Signals are ``torch.Tensor`` objects laid out as ``[..., C, T]``: time is the
last axis, channels the second to last, and any leading axes are batch axes.
Gradients come from torch's reverse-mode autograd; :func:`grad_check` verifies
them against central finite differences.
"""
from __future__ import annotations

import contextlib
import contextvars
import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

EPS_NORM = 1e-5
EPS_RATIO = 1e-8


class ConfigError(ValueError):
    """Inconsistent shapes or hyperparameters."""


# ---------------------------------------------------------------------------
# MAC accounting

class MacCounter:
    """Accumulates multiply-accumulate counts by tag while active."""

    def __init__(self):
        self.by_tag: dict[str, int] = {}

    def add(self, tag: str, macs: int) -> None:
        self.by_tag[tag] = self.by_tag.get(tag, 0) + int(macs)

    @property
    def total(self) -> int:
        return sum(self.by_tag.values())


_ACTIVE_COUNTER: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar(
    "mac_counter", default=None
)


@contextlib.contextmanager
def counting_macs() -> Iterator[MacCounter]:
    counter = MacCounter()
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


def record_macs(tag: str, macs: int) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.add(tag, macs)


def _batch_size(x: torch.Tensor, core_dims: int) -> int:
    return int(np.prod(x.shape[:-core_dims])) if x.dim() > core_dims else 1


# ---------------------------------------------------------------------------
# Convolutions

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    padding: int | tuple[int, int] = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel", "stride", "dilation", "groups"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if min(self.pads) < 0:
            raise ConfigError("padding must be non-negative")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups={self.groups}"
            )

    @property
    def pads(self) -> tuple[int, int]:
        if isinstance(self.padding, int):
            return (self.padding, self.padding)
        return tuple(self.padding)

    @property
    def extent(self) -> int:
        return self.dilation * (self.kernel - 1) + 1

    @property
    def weight_shape(self) -> tuple[int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel)

    @property
    def transposed_weight_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.out_channels // self.groups, self.kernel)

    def out_length(self, length: int) -> int:
        return (length + sum(self.pads) - self.extent) // self.stride + 1

    def transposed_out_length(self, length: int) -> int:
        return (length - 1) * self.stride + self.dilation * (self.kernel - 1) + 1 - sum(self.pads)


def _flatten_batch(x: torch.Tensor, core_dims: int) -> tuple[torch.Tensor, tuple[int, ...]]:
    lead = x.shape[:-core_dims]
    return x.reshape((-1,) + x.shape[-core_dims:]), lead


def conv1d(x: torch.Tensor, spec: ConvSpec, weight: torch.Tensor, bias: torch.Tensor | None = None):
    """1-D convolution over ``[..., C_in, T]``."""
    if x.dim() < 2 or x.shape[-2] != spec.in_channels:
        raise ConfigError(f"expected {spec.in_channels} input channels, got shape {tuple(x.shape)}")
    if tuple(weight.shape) != spec.weight_shape:
        raise ConfigError(f"weight shape {tuple(weight.shape)} != {spec.weight_shape}")
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ConfigError(f"bias shape {tuple(bias.shape)} != ({spec.out_channels},)")
    length = x.shape[-1]
    if length + sum(spec.pads) < spec.extent:
        raise ConfigError(f"input length {length} shorter than kernel extent {spec.extent}")
    xb, lead = _flatten_batch(x, 2)
    left, right = spec.pads
    if left == right:
        y = F.conv1d(xb, weight, bias, spec.stride, left, spec.dilation, spec.groups)
    else:
        y = F.conv1d(F.pad(xb, (left, right)), weight, bias, spec.stride, 0, spec.dilation, spec.groups)
    record_macs(
        "conv",
        xb.shape[0] * spec.out_channels * y.shape[-1] * (spec.in_channels // spec.groups) * spec.kernel,
    )
    return y.reshape(lead + y.shape[-2:])


def transposed_conv1d(x: torch.Tensor, spec: ConvSpec, weight: torch.Tensor, bias: torch.Tensor | None = None):
    """Transposed 1-D convolution; output length ``(T-1)*stride + kernel - pad_total``."""
    if x.dim() < 2 or x.shape[-2] != spec.in_channels:
        raise ConfigError(f"expected {spec.in_channels} input channels, got shape {tuple(x.shape)}")
    if tuple(weight.shape) != spec.transposed_weight_shape:
        raise ConfigError(f"weight shape {tuple(weight.shape)} != {spec.transposed_weight_shape}")
    left, right = spec.pads
    xb, lead = _flatten_batch(x, 2)
    y = F.conv_transpose1d(xb, weight, bias, spec.stride, 0, 0, spec.groups, spec.dilation)
    y = y[..., left : y.shape[-1] - right]
    record_macs(
        "conv",
        xb.shape[0] * spec.in_channels * xb.shape[-1] * (spec.out_channels // spec.groups) * spec.kernel,
    )
    return y.reshape(lead + y.shape[-2:])


class Conv1d(nn.Module):
    """Parameter holder around :func:`conv1d`."""

    def __init__(self, in_channels, out_channels, kernel=1, stride=1, padding=0, groups=1,
                 dilation=1, bias=True):
        super().__init__()
        self.spec = ConvSpec(in_channels, out_channels, kernel, stride, dilation, groups, padding)
        self.weight = nn.Parameter(torch.zeros(self.spec.weight_shape))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None

    @property
    def fan_in(self) -> int:
        return (self.spec.in_channels // self.spec.groups) * self.spec.kernel

    def forward(self, x):
        return conv1d(x, self.spec, self.weight, self.bias)

    def extra_repr(self):
        s = self.spec
        return f"{s.in_channels}, {s.out_channels}, k={s.kernel}, s={s.stride}, g={s.groups}, pad={s.padding}"


class TransposedConv1d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel=1, stride=1, padding=0, groups=1, bias=True):
        super().__init__()
        self.spec = ConvSpec(in_channels, out_channels, kernel, stride, 1, groups, padding)
        self.weight = nn.Parameter(torch.zeros(self.spec.transposed_weight_shape))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None

    @property
    def fan_in(self) -> int:
        # each output sample receives in_channels * kernel / stride contributions
        return max(1, self.spec.in_channels * self.spec.kernel // (self.spec.stride * self.spec.groups))

    def forward(self, x):
        return transposed_conv1d(x, self.spec, self.weight, self.bias)


class Conv3d(nn.Module):
    """3-D convolution over video features laid out ``[B, C, T, H, W]``."""

    def __init__(self, in_channels, out_channels, kernel=(1, 1, 1), stride=(1, 1, 1), padding=(0, 0, 0),
                 bias=True):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = tuple(kernel), tuple(stride), tuple(padding)
        self.weight = nn.Parameter(torch.zeros((out_channels, in_channels) + self.kernel))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None

    @property
    def fan_in(self) -> int:
        return self.in_channels * math.prod(self.kernel)

    def forward(self, x):
        y = F.conv3d(x, self.weight, self.bias, self.stride, self.padding)
        record_macs("conv", y.numel() * self.in_channels * math.prod(self.kernel))
        return y


def init_parameters(module: nn.Module, seed: int) -> nn.Module:
    """Uniform(-a, a) weights with ``a = sqrt(1/fan_in)``; zero biases.

    Only convolution holders are touched, so parameters with bespoke
    initialisation (diffusion coefficients, codebooks, norms) keep theirs.
    Parameters are visited in registration order, which makes the result a
    pure function of ``seed`` and the architecture.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, (Conv1d, TransposedConv1d, Conv3d, Linear)):
                a = math.sqrt(1.0 / sub.fan_in)
                w = torch.rand(sub.weight.shape, generator=gen, dtype=torch.float64) * 2 * a - a
                sub.weight.copy_(w.to(sub.weight.dtype))
                if sub.bias is not None:
                    sub.bias.zero_()
    return module


class Linear(nn.Module):
    """Dense map over the last axis, recorded as MACs."""

    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.weight = nn.Parameter(torch.zeros(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None

    @property
    def fan_in(self) -> int:
        return self.in_features

    def forward(self, x):
        record_macs("linear", _batch_size(x, 1) * self.in_features * self.out_features)
        return F.linear(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# DCT

@functools.lru_cache(maxsize=64)
def _dct_matrix_np(length: int) -> np.ndarray:
    t = np.arange(length) + 0.5
    p = np.arange(length)[:, None]
    mat = np.sqrt(2.0 / length) * np.cos(np.pi * p * t / length)
    mat[0] /= np.sqrt(2.0)
    return mat


def dct_matrix(length: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """Orthonormal DCT-II matrix ``C`` with ``C[p, t]``; ``C @ C.T == I``."""
    return torch.from_numpy(_dct_matrix_np(length)).to(dtype=dtype, device=device)


# above this length the FFT route is cheaper than the dense product
DCT_FFT_THRESHOLD = 256


def _dct2_fft(x: torch.Tensor) -> torch.Tensor:
    # even/odd reordering turns a length-T DCT-II into a length-T FFT
    n = x.shape[-1]
    v = torch.cat([x[..., ::2], x[..., 1::2].flip(-1)], dim=-1)
    spec = torch.fft.fft(v, dim=-1)
    k = torch.arange(n, dtype=x.dtype, device=x.device)
    phase = torch.exp(-1j * math.pi * k / (2 * n)).to(spec.dtype)
    out = (spec * phase).real * math.sqrt(2.0 / n)
    scale = torch.ones(n, dtype=x.dtype, device=x.device)
    scale[0] = 1 / math.sqrt(2.0)
    return out * scale


def _idct2_fft(coef: torch.Tensor) -> torch.Tensor:
    n = coef.shape[-1]
    scale = torch.ones(n, dtype=coef.dtype, device=coef.device)
    scale[0] = 1 / math.sqrt(2.0)
    c = coef / (scale * math.sqrt(2.0 / n))
    k = torch.arange(n, dtype=coef.dtype, device=coef.device)
    phase = torch.exp(1j * math.pi * k / (2 * n))
    # rebuild the Hermitian spectrum of the reordered sequence
    shifted = torch.cat([torch.zeros_like(c[..., :1]), c[..., 1:].flip(-1)], dim=-1)
    spec = (c - 1j * shifted) * phase
    v = torch.fft.ifft(spec, dim=-1).real
    out = torch.empty_like(v)
    half = (n + 1) // 2
    out[..., ::2] = v[..., :half]
    out[..., 1::2] = v[..., half:].flip(-1)
    return out


def dct2(x: torch.Tensor, method: str = "auto") -> torch.Tensor:
    """Orthonormal DCT-II along the last axis.

    ``method`` is ``"direct"`` (dense matrix product), ``"fft"`` or ``"auto"``.
    """
    n = x.shape[-1]
    if n < 1:
        raise ConfigError("dct2 needs at least one sample")
    if method == "auto":
        method = "fft" if n > DCT_FFT_THRESHOLD else "direct"
    record_macs("dct", _batch_size(x, 1) * (n * n if method == "direct" else 2 * n * max(1, math.ceil(math.log2(n)))))
    if method == "direct":
        return x @ dct_matrix(n, x.dtype, x.device).T
    if method == "fft":
        return _dct2_fft(x)
    raise ConfigError(f"unknown dct method {method!r}")


def idct2(coef: torch.Tensor, method: str = "auto") -> torch.Tensor:
    """Inverse of :func:`dct2` (a DCT-III under the same normalisation)."""
    n = coef.shape[-1]
    if method == "auto":
        method = "fft" if n > DCT_FFT_THRESHOLD else "direct"
    record_macs("dct", _batch_size(coef, 1) * (n * n if method == "direct" else 2 * n * max(1, math.ceil(math.log2(n)))))
    if method == "direct":
        return coef @ dct_matrix(n, coef.dtype, coef.device)
    if method == "fft":
        return _idct2_fft(coef)
    raise ConfigError(f"unknown dct method {method!r}")


# ---------------------------------------------------------------------------
# Spectral magnitude, resampling along time

def stft_mag(s: torch.Tensor, win_len: int = 512, hop: int = 128, window: str = "hann") -> torch.Tensor:
    """Magnitude STFT of ``[..., L]`` -> ``[..., win_len//2 + 1, frames]``.

    Frames are taken without centre padding, so ``frames = (L - win_len)//hop + 1``.
    """
    length = s.shape[-1]
    if win_len > length:
        raise ValueError(f"window {win_len} longer than signal {length}")
    if window == "hann":
        win = torch.hann_window(win_len, periodic=True, dtype=s.dtype, device=s.device)
    elif window in ("rect", "boxcar", "rectangular"):
        win = torch.ones(win_len, dtype=s.dtype, device=s.device)
    else:
        raise ConfigError(f"unknown window {window!r}")
    frames = s.unfold(-1, win_len, hop) * win
    return torch.fft.rfft(frames, dim=-1).abs().transpose(-1, -2)


def interpolate_time(x: torch.Tensor, target: int, mode: str = "nearest") -> torch.Tensor:
    """Resample ``[..., C, T]`` to ``target`` steps.

    ``linear`` aligns the first and last samples of input and output.
    """
    if target < 1:
        raise ConfigError("target length must be >= 1")
    if x.shape[-1] == target:
        return x
    xb, lead = _flatten_batch(x, 2)
    if mode == "nearest":
        y = F.interpolate(xb, size=target, mode="nearest")
    elif mode == "linear":
        y = F.interpolate(xb, size=target, mode="linear", align_corners=True)
    else:
        raise ConfigError(f"unknown interpolation mode {mode!r}")
    return y.reshape(lead + y.shape[-2:])


def pool_time(x: torch.Tensor, factor: int) -> torch.Tensor:
    """Non-overlapping mean pooling; short tails are padded with the edge value."""
    if factor == 1:
        return x
    rem = x.shape[-1] % factor
    if rem:
        x = torch.cat([x, x[..., -1:].expand(*x.shape[:-1], factor - rem)], dim=-1)
    return x.reshape(*x.shape[:-1], x.shape[-1] // factor, factor).mean(-1)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm_channels(x, gain=None, bias=None, eps: float = EPS_NORM):
    """Normalise each time step over the channel axis (``-2``)."""
    mean = x.mean(dim=-2, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-2, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain[:, None]
    if bias is not None:
        y = y + bias[:, None]
    return y


class ChannelNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return layer_norm_channels(x, self.gain, self.bias)


# ---------------------------------------------------------------------------
# Gradient verification

@dataclass
class GradReport:
    max_relative_error: float
    per_parameter_errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.per_parameter_errors.items() if v > self.tol}

    @property
    def passed(self) -> bool:
        return not self.failures

    def __str__(self):
        lines = [f"max relative error {self.max_relative_error:.3e} (tol {self.tol:g})"]
        for name, err in self.per_parameter_errors.items():
            flag = "FAIL" if err > self.tol else "ok"
            lines.append(f"  {flag:4s} {name}: {err:.3e}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor: float = EPS_RATIO) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps exact zeros from dividing noise by noise."""
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    tol: float = 1e-4,
    step: float = 1e-4,
    max_coords: int | None = 24,
    seed: int = 0,
    atol: float = 1e-8,
) -> GradReport:
    """Compare autograd gradients of a scalar closure with central differences.

    ``params`` maps names to float64 leaf tensors that ``loss_fn`` reads. Up to
    ``max_coords`` coordinates per tensor are probed (all when ``None``).
    Tensors with ``requires_grad=False`` are frozen: their analytic gradient
    slot is zero and they are checked against that. Absolute disagreement
    below ``atol`` always passes, which matters for exactly-zero gradients.
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ConfigError(f"grad_check needs float64 tensors; {name} is {p.dtype}")
    trainable = [p for p in params.values() if p.requires_grad]
    for p in trainable:
        p.grad = None
    loss = loss_fn()
    if loss.numel() != 1:
        raise ConfigError("loss closure must return a scalar")
    grads = torch.autograd.grad(loss, trainable, allow_unused=True) if trainable else ()
    analytic_by_id = {id(p): g for p, g in zip(trainable, grads)}

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name, p in params.items():
        g = analytic_by_id.get(id(p)) if p.requires_grad else None
        analytic = torch.zeros_like(p) if g is None else g
        flat = p.detach().view(-1)
        n = flat.numel()
        idx = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        worst = 0.0
        with torch.no_grad():
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                if not p.requires_grad:
                    # frozen: the slot is zero by definition, report its magnitude
                    worst = max(worst, float(abs(analytic.reshape(-1)[i].item())))
                    continue
                err = relative_error(analytic.reshape(-1)[i].item(), numeric, atol / tol)
                worst = max(worst, float(err))
        errors[name] = worst
    return GradReport(max(errors.values(), default=0.0), errors, tol)


def module_params(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + n: p for n, p in module.named_parameters()}
