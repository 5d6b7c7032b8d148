"""Synthetic audio-visual corpus: harmonic "speakers" whose loudness drives a drawn lip aperture."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter1d

from .config import FRAME_RATE, SAMPLE_RATE
from .numerics import ConfigError

FRAME_SIZE = 16
SPLIT_STRIDE = 1_000_000
SPLITS = ("train", "val", "test")
TARGET_RMS = 0.1


@dataclass
class AVSample:
    audio: torch.Tensor  # [1, L] float32 at 16 kHz
    video: torch.Tensor  # [1, T_v, H, W] float32 in [0, 1], 25 fps
    speaker_id: int
    seed: int
    envelope: np.ndarray  # per-frame loudness driving both streams

    @property
    def frames(self) -> int:
        return self.video.shape[1]


def check_sync(audio_len: int, frames: int) -> None:
    if audio_len * FRAME_RATE != frames * SAMPLE_RATE:
        raise ValueError(f"audio ({audio_len} samples) and video ({frames} frames) are not synchronised")


def frames_for(duration_s: float) -> int:
    frames = duration_s * FRAME_RATE
    if abs(frames - round(frames)) > 1e-9:
        raise ValueError(f"duration {duration_s}s is not a whole number of 40 ms frames")
    return int(round(frames))


def _envelope(rng, frames):
    """Smooth syllable-like loudness in [0, 1], active roughly a third of the time."""
    raw = gaussian_filter1d(rng.standard_normal(frames + 8), 1.5, mode="nearest")[4 : frames + 4]
    raw = (raw - raw.mean()) / (raw.std() + 1e-12)
    return 1 / (1 + np.exp(-6 * (raw - 0.5)))


def render_lips(aperture, size: int = FRAME_SIZE, width: float = 5.0):
    """Grayscale frames of a mouth whose opening height is ``aperture`` (0 = closed) times ``size / 3``."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = size * 0.6, size * 0.5
    frames = np.empty((len(aperture), size, size))
    for t, a in enumerate(aperture):
        half_h = max(a * size / 6, 1e-6)
        inside = ((xs - cx) / width) ** 2 + ((ys - cy) / half_h) ** 2
        opening = 1 / (1 + np.exp(np.minimum(8 * (inside - 1), 50))) if a > 0 else np.zeros_like(xs)
        lip_line = np.exp(-0.5 * ((ys - cy) / 0.7) ** 2) * (np.abs(xs - cx) < width)
        frames[t] = 0.7 - 0.25 * lip_line * (1 - opening) - 0.6 * opening
    return np.clip(frames, 0.0, 1.0)


def synth_utterance(seed: int, duration_s: float = 2.0, amplitude: float = 1.0, size: int = FRAME_SIZE) -> AVSample:
    frames = frames_for(duration_s)
    n = frames * SAMPLE_RATE // FRAME_RATE
    rng = np.random.default_rng([seed, 0xA11])
    nominal = _envelope(rng, frames)
    env = amplitude * nominal

    f0 = rng.uniform(100.0, 260.0)
    contour = f0 * (1 + 0.08 * gaussian_filter1d(rng.standard_normal(frames + 8), 3.0)[4 : frames + 4])
    t_frames = (np.arange(frames) + 0.5) / FRAME_RATE
    t_audio = (np.arange(n) + 0.5) / SAMPLE_RATE
    pitch = np.interp(t_audio, t_frames, contour)
    phase = 2 * np.pi * np.cumsum(pitch) / SAMPLE_RATE
    n_harm = int(min(20, 7000 // (f0 * 1.1)))
    tilt = rng.uniform(0.6, 1.4)
    audio = np.zeros(n)
    for h in range(1, n_harm + 1):
        audio += h**-tilt * rng.uniform(0.5, 1.0) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    audio *= np.interp(t_audio, t_frames, nominal)
    audio *= amplitude * TARGET_RMS / math.sqrt(np.mean(audio**2))
    width = rng.uniform(4.0, 6.0) * size / 16
    video = render_lips(env, size, width)
    return AVSample(
        audio=torch.from_numpy(audio.astype(np.float32))[None],
        video=torch.from_numpy(video.astype(np.float32))[None],
        speaker_id=seed,
        seed=seed,
        envelope=env,
    )


def frame_rms(audio, frames: int) -> np.ndarray:
    a = np.asarray(audio, dtype=np.float64).reshape(frames, -1)
    return np.sqrt(np.mean(a**2, axis=1))


def mix_raw(sources, noise_snr_db: float = math.inf, seed: int = 0):
    """``sum(sources) + n`` with Gaussian ``n`` at ``noise_snr_db`` relative to ``sources[0]``."""
    lengths = {s.shape[-1] for s in sources}
    if len(lengths) != 1:
        raise ValueError(f"source lengths differ: {sorted(lengths)}")
    mixture = torch.stack(list(sources)).sum(0)
    if math.isfinite(noise_snr_db):
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn(mixture.shape, generator=gen, dtype=mixture.dtype)
        power = sources[0].pow(2).mean()
        noise = noise * torch.sqrt(power / noise.pow(2).mean() / 10 ** (noise_snr_db / 10))
        mixture = mixture + noise
    return mixture


def mix(samples, noise_snr_db: float = math.inf, seed: int = 0):
    """Returns ``(mixture, targets)``, both peak-limited to 0.99 by one shared scale."""
    audio = [s.audio if isinstance(s, AVSample) else s for s in samples]
    mixture = mix_raw(audio, noise_snr_db, seed)
    peak = float(mixture.abs().max())
    scale = min(1.0, 0.99 / peak) if peak > 0 else 1.0
    return mixture * scale, [a * scale for a in audio]


# ---------------------------------------------------------------------------

def split_seeds(split: str, count: int, base: int = 0) -> list[tuple[int, int]]:
    """(target, interferer) utterance seed pairs for a split; splits never overlap."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    if 2 * count > SPLIT_STRIDE:
        raise ConfigError(f"{count} mixtures overflow the seed range of a split")
    start = base + SPLITS.index(split) * SPLIT_STRIDE
    return [(start + 2 * i, start + 2 * i + 1) for i in range(count)]


def make_manifest(n_train: int, n_val: int, n_test: int, clip_seconds: float = 2.0,
                  noise_snr_db: float = math.inf, base: int = 0) -> list[dict]:
    frames_for(clip_seconds)
    entries = []
    for split, count in zip(SPLITS, (n_train, n_val, n_test)):
        for i, (a, b) in enumerate(split_seeds(split, count, base)):
            entries.append({
                "split": split, "index": i, "target_seed": a, "interferer_seed": b,
                "noise_seed": a, "clip_seconds": clip_seconds,
                "noise_snr_db": None if math.isinf(noise_snr_db) else noise_snr_db,
            })
    seen = {}
    for e in entries:
        for s in (e["target_seed"], e["interferer_seed"]):
            if seen.setdefault(s, e["split"]) != e["split"]:
                raise ConfigError(f"seed {s} shared between splits")
    return entries


@dataclass
class MixtureExample:
    mixture: torch.Tensor  # [1, L]
    sources: list  # [1, L] each, target first
    videos: list  # [1, T_v, H, W] each
    entry: dict


def decorrelate(interferer, target):
    """Remove the component of ``interferer`` along ``target`` and restore its energy."""
    t = target.double()
    b = interferer.double()
    energy = b.pow(2).sum()
    b = b - (b * t).sum() / t.pow(2).sum() * t
    return (b * torch.sqrt(energy / b.pow(2).sum())).to(interferer.dtype)


def build_example(entry: dict) -> MixtureExample:
    a = synth_utterance(entry["target_seed"], entry["clip_seconds"])
    b = synth_utterance(entry["interferer_seed"], entry["clip_seconds"])
    snr = entry.get("noise_snr_db")
    # orthogonal equal-energy sources put every mixture at exactly 0 dB input SI-SNR
    mixture, sources = mix([a.audio, decorrelate(b.audio, a.audio)], math.inf if snr is None else snr,
                           entry["noise_seed"])
    return MixtureExample(mixture, sources, [a.video, b.video], entry)


def write_manifest(path, entries) -> None:
    from .fileio import atomic_write_text

    atomic_write_text(path, "".join(json.dumps(e, sort_keys=True) + "\n" for e in entries))


def read_manifest(path) -> list[dict]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return entries


def make_dataset(out_dir, n_train: int = 64, n_val: int = 16, n_test: int = 16, clip_seconds: float = 2.0,
                 noise_snr_db: float = math.inf, base: int = 0, write_files: bool = False) -> Path:
    """Write ``manifest.jsonl`` (and optionally WAV/video files) under ``out_dir``."""
    from .fileio import save_tensors, write_wav

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = make_manifest(n_train, n_val, n_test, clip_seconds, noise_snr_db, base)
    if write_files:
        for e in entries:
            ex = build_example(e)
            stem = f"{e['split']}_{e['index']:04d}"
            write_wav(out / f"{stem}_mix.wav", ex.mixture)
            write_wav(out / f"{stem}_s1.wav", ex.sources[0])
            write_wav(out / f"{stem}_s2.wav", ex.sources[1])
            save_tensors(out / f"{stem}_v1.bin", {"video": ex.videos[0]})
            save_tensors(out / f"{stem}_v2.bin", {"video": ex.videos[1]})
            e.update(mix=f"{stem}_mix.wav", s1=f"{stem}_s1.wav", s2=f"{stem}_s2.wav",
                     v1=f"{stem}_v1.bin", v2=f"{stem}_v2.bin")
    path = out / "manifest.jsonl"
    write_manifest(path, entries)
    return path
