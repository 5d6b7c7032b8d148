"""Full model assembly, toy training loops and multi-speaker inference."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audiocodec import AudioDecoder, AudioEncoder
from .avf import AudioVisualFusion
from .config import FRAME_RATE, SAMPLE_RATE, ModelConfig, RunConfig
from .datagen import build_example, check_sync, read_manifest
from .fileio import atomic_write_text, load_weights, save_weights
from .lipcoder import DPLipCoder, ToyTeacher, pretrain_losses
from .losses import LossConfig, lambda_schedule, sdri, sisnri, total_loss
from .numerics import Conv1d, ConfigError, init_parameters, interpolate_time
from .separator import Separator

log = logging.getLogger(__name__)

SAMPLES_PER_FRAME = SAMPLE_RATE // FRAME_RATE


class TrainingError(RuntimeError):
    pass


class DolphinModel(nn.Module):
    """Frozen video codec -> audio encoder -> fusion -> separator -> audio decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.lipcoder = DPLipCoder(cfg)
        self.encoder = AudioEncoder(cfg.n_audio, cfg.enc_kernel, cfg.enc_stride)
        self.avf = AudioVisualFusion(cfg.visual_dim, cfg.n_audio, cfg.avf_hidden, cfg.avf_depth, cfg.avf_subspaces)
        self.separator = Separator(cfg)
        self.decoder = AudioDecoder(cfg.n_audio, cfg.enc_kernel, cfg.enc_stride)
        # auxiliary estimate from the level-3 decoder state, used by the spectral loss
        self.aux_head = Conv1d(cfg.n_audio, cfg.n_audio, 1) if cfg.q_levels >= 3 else None
        self.freeze_lipcoder()

    def freeze_lipcoder(self):
        self.lipcoder.requires_grad_(False)
        self.lipcoder.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        self.lipcoder.eval()
        return self

    def trainable_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("lipcoder.") and p.requires_grad]

    def pad(self, wav):
        extra = (-wav.shape[-1]) % self.cfg.length_multiple
        return F.pad(wav, (0, extra)) if extra else wav

    @torch.no_grad()
    def visual_tokens(self, video):
        """``[B, 1, T_v, H, W] -> (V_r, V_s)``, each ``[B, d_v, T_v]``."""
        return self.lipcoder.tokens(video)

    def forward_from_tokens(self, wav, v_rec, v_sem):
        """``wav [B, 1, L]`` with precomputed visual tokens; returns ``(S_hat, S3_hat)``."""
        length = wav.shape[-1]
        x = self.encoder(self.pad(wav))
        fused = self.avf(v_rec, v_sem, x)
        j = self.cfg.fusion_position
        if j == 0:
            est, tap = self.separator(fused, x)
        else:
            est, tap = self.separator(x, x, fused, j)
        s_hat = self.decoder(est, length)
        s3 = None
        if tap is not None and self.aux_head is not None:
            up = interpolate_time(tap, x.shape[-1], "linear")
            s3 = self.decoder(F.relu(self.aux_head(up)) * x, length)
        return s_hat, s3

    def forward(self, wav, video):
        check_sync(wav.shape[-1], video.shape[-3])
        v_rec, v_sem = self.visual_tokens(video)
        return self.forward_from_tokens(wav, v_rec, v_sem)

    def separate_multi(self, wav, videos):
        if not videos:
            raise ValueError("need at least one target video")
        return [self.forward(wav, v)[0] for v in videos]


def build_model(cfg: ModelConfig, seed: int = 0) -> DolphinModel:
    model = DolphinModel(cfg)
    init_parameters(model, seed)
    model.freeze_lipcoder()
    return model


def lipcoder_state(model: DolphinModel) -> dict[str, torch.Tensor]:
    return {k: v.clone() for k, v in model.lipcoder.state_dict().items()}


# ---------------------------------------------------------------------------
# data

@dataclass
class SeparationSet:
    """One row per (mixture, target speaker) pair with cached visual tokens."""
    mixtures: torch.Tensor  # [N, 1, L]
    targets: torch.Tensor  # [N, 1, L]
    v_rec: torch.Tensor  # [N, d_v, T_v]
    v_sem: torch.Tensor
    seeds: list

    def __len__(self):
        return self.mixtures.shape[0]


def load_split(entries, split: str, model: DolphinModel, both_targets: bool = True) -> SeparationSet:
    mixtures, targets, videos, seeds = [], [], [], []
    for e in entries:
        if e["split"] != split:
            continue
        ex = build_example(e)
        for who in range(2 if both_targets else 1):
            mixtures.append(ex.mixture)
            targets.append(ex.sources[who])
            videos.append(ex.videos[who])
            seeds.append(e["target_seed"] if who == 0 else e["interferer_seed"])
    if not mixtures:
        raise ConfigError(f"manifest has no {split!r} entries")
    v_rec, v_sem = [], []
    for i in range(0, len(videos), 8):
        r, s = model.visual_tokens(torch.stack(videos[i : i + 8]))
        v_rec.append(r)
        v_sem.append(s)
    return SeparationSet(torch.stack(mixtures), torch.stack(targets), torch.cat(v_rec), torch.cat(v_sem), seeds)


def random_crops(data: SeparationSet, idx, frames: int, gen: torch.Generator):
    total = data.v_rec.shape[-1]
    starts = torch.randint(0, total - frames + 1, (len(idx),), generator=gen).tolist()
    mix, tgt, vr, vs = [], [], [], []
    for i, f in zip(idx, starts):
        a, b = f * SAMPLES_PER_FRAME, (f + frames) * SAMPLES_PER_FRAME
        mix.append(data.mixtures[i, :, a:b])
        tgt.append(data.targets[i, :, a:b])
        vr.append(data.v_rec[i, :, f : f + frames])
        vs.append(data.v_sem[i, :, f : f + frames])
    return torch.stack(mix), torch.stack(tgt), torch.stack(vr), torch.stack(vs), starts


@torch.no_grad()
def evaluate(model: DolphinModel, data: SeparationSet, batch: int = 8, loss_cfg: LossConfig = LossConfig()):
    """Full-clip metrics: ``{"loss", "sisnri", "sdri"}`` (per-row lists for the metrics)."""
    model.eval()
    si, sd, losses = [], [], []
    for i in range(0, len(data), batch):
        sl = slice(i, i + batch)
        est, est3 = model.forward_from_tokens(data.mixtures[sl], data.v_rec[sl], data.v_sem[sl])
        ref, mixture = data.targets[sl].double(), data.mixtures[sl].double()
        si += sisnri(ref, est.double(), mixture).reshape(-1).tolist()
        sd += sdri(ref, est.double(), mixture).reshape(-1).tolist()
        losses.append(float(total_loss(data.targets[sl], est, est3, 1, loss_cfg)) * est.shape[0])
    model.train()
    return {"loss": sum(losses) / len(data), "sisnri": si, "sdri": sd}


# ---------------------------------------------------------------------------
# schedules

@dataclass
class PlateauController:
    """Halve the learning rate after ``patience`` epochs without improvement; stop after ``stop``."""
    lr: float
    patience: int = 15
    stop: int = 30
    factor: float = 0.5
    best: float = math.inf
    since_best: int = 0
    since_change: int = 0

    def update(self, value: float) -> str:
        if value < self.best:
            self.best = value
            self.since_best = self.since_change = 0
            return "improved"
        self.since_best += 1
        self.since_change += 1
        if self.since_best >= self.stop:
            return "stop"
        if self.since_change >= self.patience:
            self.lr *= self.factor
            self.since_change = 0
            return "halved"
        return "wait"


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the norm before."""
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


def _write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# separation training

@dataclass
class TrainResult:
    model: DolphinModel
    train_trace: list = field(default_factory=list)
    val_trace: list = field(default_factory=list)
    test: dict | None = None
    steps: int = 0


def train_separation(cfg: RunConfig, entries=None, model: DolphinModel | None = None, out_dir=None,
                     evaluate_test: bool = True, steps_per_epoch: int | None = None) -> TrainResult:
    """Adam on random crops with gradient clipping, plateau halving, early stopping and the lambda schedule."""
    torch.manual_seed(cfg.seed)
    if entries is None:
        entries = read_manifest(Path(cfg.data_dir) / "manifest.jsonl")
    if model is None:
        model = build_model(cfg.model, cfg.seed)
        if cfg.video_weights:
            load_weights(model.lipcoder, cfg.video_weights)
            model.freeze_lipcoder()
    frozen = lipcoder_state(model)
    train = load_split(entries, "train", model)
    val = load_split(entries, "val", model, both_targets=False)
    out = Path(out_dir) if out_dir else None

    params = model.trainable_parameters()
    opt = torch.optim.Adam(params, lr=cfg.lr, betas=(0.9, 0.999))
    plateau = PlateauController(cfg.lr, cfg.plateau_patience, cfg.early_stop)
    gen = torch.Generator().manual_seed(cfg.seed + 17)
    frames = max(1, int(round(cfg.crop_seconds * FRAME_RATE)))
    if steps_per_epoch is None:
        # one epoch covers the training audio once, measured in crop-seconds
        clip_frames = train.v_rec.shape[-1]
        steps_per_epoch = max(1, math.ceil(len(train) * clip_frames / (frames * cfg.batch_size)))
    result = TrainResult(model)
    loss_cfg = LossConfig()
    model.train()
    step, epoch = 0, 1
    while step < cfg.steps:
        lam = lambda_schedule(epoch, loss_cfg) if cfg.use_lambda_schedule else 0.0
        order = torch.randperm(len(train), generator=gen).tolist()
        for b in range(steps_per_epoch):
            if step >= cfg.steps:
                break
            if (b + 1) * cfg.batch_size > len(order):
                order += torch.randperm(len(train), generator=gen).tolist()
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            mix, tgt, vr, vs, starts = random_crops(train, idx, frames, gen)
            est, est3 = model.forward_from_tokens(mix, vr, vs)
            loss = total_loss(tgt, est, est3, lam=lam)
            if not torch.isfinite(loss):
                dump = {"step": step, "epoch": epoch, "rows": idx, "speaker_seeds": [train.seeds[i] for i in idx],
                        "crop_frames": starts, "loss": loss.item()}
                if out:
                    atomic_write_text(out / "nan_dump.json", json.dumps(dump, indent=2))
                raise TrainingError(f"non-finite loss at step {step}: {dump}")
            opt.zero_grad()
            loss.backward()
            norm = clip_gradients(params, cfg.grad_clip)
            opt.step()
            step += 1
            result.train_trace.append((step, epoch, loss.item(), plateau.lr, norm))
        metrics = evaluate(model, val, loss_cfg=loss_cfg)
        action = plateau.update(metrics["loss"])
        for group in opt.param_groups:
            group["lr"] = plateau.lr
        result.val_trace.append((epoch, metrics["loss"], float(np.mean(metrics["sisnri"])), plateau.lr, action))
        log.info("epoch %d step %d val loss %.3f sisnri %.2f (%s)", epoch, step, metrics["loss"],
                 np.mean(metrics["sisnri"]), action)
        if out:
            save_weights(model, out / "last.dlph")
            if action == "improved":
                save_weights(model, out / "best.dlph")
            _write_csv(out / "train_trace.csv", ("step", "epoch", "loss", "lr", "grad_norm"), result.train_trace)
            _write_csv(out / "val_trace.csv", ("epoch", "val_loss", "val_sisnri", "lr", "action"), result.val_trace)
        if action == "stop":
            break
        epoch += 1
    result.steps = step
    for name, value in model.lipcoder.state_dict().items():
        if not torch.equal(value, frozen[name]):
            raise TrainingError(f"frozen video codec parameter {name} changed during training")
    if evaluate_test:
        test = load_split(entries, "test", model)
        metrics = evaluate(model, test, loss_cfg=loss_cfg)
        result.test = {"sisnri": float(np.mean(metrics["sisnri"])), "sdri": float(np.mean(metrics["sdri"])),
                       "rows": metrics}
    return result


# ---------------------------------------------------------------------------
# video codec pretraining

@dataclass
class PretrainResult:
    lipcoder: DPLipCoder
    losses: list
    eval_losses: list
    events: list


def collect_videos(entries, split: str = "train") -> torch.Tensor:
    videos = []
    for e in entries:
        if e["split"] == split:
            ex = build_example(e)
            videos.extend(ex.videos)
    return torch.stack(videos)


def pretrain_lipcoder(cfg: RunConfig, videos, out_dir=None, eval_every: int = 10) -> PretrainResult:
    """Three-loss pretraining of the video codec against the frozen toy teacher.

    The codebook is initialised by k-means before the first gradient step.
    """
    mcfg = cfg.model
    torch.manual_seed(cfg.seed)
    lip = DPLipCoder(mcfg)
    init_parameters(lip, cfg.seed)
    teacher = ToyTeacher(mcfg.teacher_dim, cfg.seed)
    events = []
    inertia = lip.init_codebook([videos[i : i + 8] for i in range(0, len(videos), 8)], cfg.kmeans_restarts, cfg.seed)
    events.append(("kmeans", inertia))
    opt = torch.optim.Adam(lip.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed + 5)
    frames = max(1, int(round(cfg.crop_seconds * FRAME_RATE)))
    fixed = videos[: cfg.pretrain_batch, :, :frames]
    with torch.no_grad():
        fixed_teacher = teacher(fixed)

    def eval_loss():
        lip.eval()
        with torch.no_grad():
            out = lip(fixed, 0.0)
            value = float(pretrain_losses(fixed, out, fixed_teacher, lip.distill)["total"])
        lip.train()
        return value

    losses, eval_losses = [], [(0, eval_loss())]
    best, since_best = math.inf, 0
    lip.train()
    for step in range(cfg.pretrain_steps):
        idx = torch.randint(0, len(videos), (cfg.pretrain_batch,), generator=gen)
        start = int(torch.randint(0, videos.shape[2] - frames + 1, (1,), generator=gen))
        batch = videos[idx, :, start : start + frames]
        out = lip(batch, mcfg.vq_temperature, generator=gen)
        parts = pretrain_losses(batch, out, teacher(batch), lip.distill)
        if not torch.isfinite(parts["total"]):
            raise TrainingError(f"non-finite pretraining loss at step {step} (batch rows {idx.tolist()}, frame {start})")
        if step == 0:
            events.append(("first_step", None))
        opt.zero_grad()
        parts["total"].backward()
        clip_gradients(lip.parameters(), cfg.grad_clip)
        opt.step()
        losses.append({k: float(v.detach()) for k, v in parts.items()})
        if (step + 1) % eval_every == 0:
            eval_losses.append((step + 1, eval_loss()))
        if parts["total"].item() < best:
            best, since_best = parts["total"].item(), 0
        else:
            since_best += 1
            if since_best >= cfg.pretrain_patience:
                break
    lip.eval()
    if out_dir:
        out = Path(out_dir)
        save_weights(lip, out / "lipcoder.dlph")
        _write_csv(out / "pretrain_trace.csv", ("step", "total", "commit", "distill", "recon"),
                   [(i + 1, l["total"], l["commit"], l["distill"], l["recon"]) for i, l in enumerate(losses)])
    return PretrainResult(lip, losses, eval_losses, events)
