"""Parameter, MAC and latency accounting."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import FRAME_RATE, SAMPLE_RATE
from .numerics import counting_macs

# Published full-scale efficiency figures, shown next to measurements for context only.
REFERENCE_FULL_SCALE = {"params_m": 6.22, "macs_g": 8.51}


def _unique(params):
    seen = set()
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            yield p


def count_params(module: nn.Module, trainable_only: bool = False) -> int:
    """Scalar parameter count; shared tensors are counted once."""
    return sum(p.numel() for p in _unique(module.parameters()) if p.requires_grad or not trainable_only)


def params_by_module(module: nn.Module) -> dict[str, int]:
    counts = {name: count_params(child) for name, child in module.named_children()}
    own = sum(p.numel() for p in module.parameters(recurse=False))
    if own:
        counts["(own)"] = own
    return counts


def param_split(model: nn.Module) -> dict[str, int]:
    """Totals without and with the frozen video codec."""
    total = count_params(model)
    frozen = sum(p.numel() for p in _unique(model.parameters()) if not p.requires_grad)
    return {"without_video": total - frozen, "video": frozen, "with_video": total}


def count_macs(fn, *args) -> dict[str, int]:
    """Run ``fn(*args)`` without autograd and return MACs by tag plus ``"total"``."""
    with torch.no_grad(), counting_macs() as counter:
        fn(*args)
    out = dict(sorted(counter.by_tag.items()))
    out["total"] = counter.total
    return out


def model_inputs(cfg, seconds: float = 1.0, batch: int = 1):
    frames = int(round(seconds * FRAME_RATE))
    wav = torch.zeros(batch, 1, frames * SAMPLE_RATE // FRAME_RATE)
    video = torch.zeros(batch, 1, frames, cfg.video_size, cfg.video_size)
    return wav, video


def count_model_macs(model, seconds: float = 1.0) -> dict[str, int]:
    """Separation-path MACs for ``seconds`` of audio (the video codec is counted under ``video_total``)."""
    wav, video = model_inputs(model.cfg, seconds)
    with torch.no_grad():
        v_rec, v_sem = model.visual_tokens(video)
    macs = count_macs(model.forward_from_tokens, wav, v_rec, v_sem)
    macs["video_total"] = count_macs(model.visual_tokens, video)["total"]
    return macs


@dataclass
class LatencyStats:
    samples_ms: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def p50(self) -> float:
        return float(np.percentile(self.samples_ms, 50))

    @property
    def p95(self) -> float:
        return float(np.percentile(self.samples_ms, 95))


def time_inference(fn, *args, runs: int = 20, warmups: int = 5) -> LatencyStats:
    """Wall-clock milliseconds of ``fn(*args)`` under ``no_grad`` on one thread."""
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        with torch.no_grad():
            for _ in range(warmups):
                fn(*args)
            samples = []
            for _ in range(runs):
                start = time.perf_counter()
                fn(*args)
                samples.append((time.perf_counter() - start) * 1e3)
    finally:
        torch.set_num_threads(threads)
    return LatencyStats(samples)


@dataclass
class EfficiencyReport:
    params_total: int
    params_by_module: dict
    params_split: dict
    input_seconds: float
    macs: dict
    latency: LatencyStats | None = None
    reference: dict = field(default_factory=lambda: dict(REFERENCE_FULL_SCALE))

    def rows(self):
        rows = [("params_total", self.params_total)]
        rows += [(f"params.{k}", v) for k, v in self.params_by_module.items()]
        rows += [(f"params_split.{k}", v) for k, v in self.params_split.items()]
        rows.append(("input_seconds", self.input_seconds))
        rows += [(f"macs.{k}", v) for k, v in self.macs.items()]
        if self.latency is not None:
            rows += [("latency_ms.mean", round(self.latency.mean, 3)), ("latency_ms.p50", round(self.latency.p50, 3)),
                     ("latency_ms.p95", round(self.latency.p95, 3)), ("latency_runs", len(self.latency.samples_ms))]
        rows += [(f"reference_full_scale.{k}", v) for k, v in self.reference.items()]
        return rows

    def to_csv(self) -> str:
        return "metric,value\n" + "".join(f"{k},{v}\n" for k, v in self.rows())

    def to_markdown(self) -> str:
        lines = ["| metric | value |", "|---|---|"] + [f"| {k} | {v} |" for k, v in self.rows()]
        return "\n".join(lines) + "\n"


def efficiency_report(model, seconds: float = 1.0, runs: int = 20, warmups: int = 5) -> EfficiencyReport:
    latency = None
    if runs > 0:
        wav, video = model_inputs(model.cfg, seconds)
        latency = time_inference(model, wav, video, runs=runs, warmups=warmups)
    return EfficiencyReport(
        params_total=count_params(model),
        params_by_module=params_by_module(model),
        params_split=param_split(model),
        input_seconds=seconds,
        macs=count_model_macs(model, seconds),
        latency=latency,
    )
