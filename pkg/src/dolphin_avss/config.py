"""Model and run configuration, and the flat ``key = value`` config format."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .numerics import ConfigError

SAMPLE_RATE = 16000
FRAME_RATE = 25


@dataclass
class ModelConfig:
    # audio path
    n_audio: int = 256
    enc_kernel: int = 16
    enc_stride: int = 4
    # separator
    q_levels: int = 4
    heads: int = 8
    head_dim: int = 128
    ffn_hidden: int = 512
    enc_gla: int = 2
    dec_gla: int = 3
    disable_ga: bool = False
    disable_la: bool = False
    local_op: str = "hda"
    hda_k_init: float = 0.1
    mask_mode: bool = False
    iterations: int = 1
    fusion_position: int = 0
    # audio-visual fusion
    avf_subspaces: int = 4
    avf_hidden: int = 64
    avf_depth: int = 4
    # video codec
    video_size: int = 88
    video_stages: int = 3
    video_channels: int = 4
    video_max_channels: int = 32
    embed_dim: int = 32
    codebook_size: int = 256
    video_heads: int = 8
    video_head_dim: int = 32
    reconstruction_path: bool = True
    teacher_dim: int = 32
    distill_hidden: int = 128
    commit_beta: float = 1.0
    vq_temperature: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_audio < 1 or self.q_levels < 0:
            raise ConfigError("n_audio must be >= 1 and q_levels >= 0")
        if self.enc_kernel < self.enc_stride or (self.enc_kernel - self.enc_stride) % 2:
            raise ConfigError("encoder kernel - stride must be even and non-negative")
        if self.enc_gla < 1 or self.dec_gla < 1:
            raise ConfigError("each encoder/decoder level needs at least one GLA block")
        if self.local_op not in ("hda", "conv"):
            raise ConfigError(f"local_op must be 'hda' or 'conv', got {self.local_op!r}")
        if not 0 <= self.fusion_position <= min(3, self.q_levels):
            raise ConfigError(f"fusion_position {self.fusion_position} outside 0..{min(3, self.q_levels)}")
        if self.iterations < 1 or self.avf_subspaces < 1:
            raise ConfigError("iterations and avf_subspaces must be >= 1")
        if self.ffn_hidden < self.n_audio:
            raise ConfigError("ffn_hidden must be >= n_audio")
        if self.video_size % (2**self.video_stages):
            raise ConfigError(f"video size {self.video_size} not divisible by 2^{self.video_stages}")

    @property
    def enc_pad(self) -> int:
        return (self.enc_kernel - self.enc_stride) // 2

    @property
    def length_multiple(self) -> int:
        """Waveform lengths are padded to a multiple of this."""
        return self.enc_stride * 2**self.q_levels

    @property
    def visual_dim(self) -> int:
        side = self.video_size // 2**self.video_stages
        return self.embed_dim * side * side

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(
            n_audio=32, q_levels=3, heads=2, head_dim=16, ffn_hidden=64, enc_gla=1, dec_gla=1,
            avf_subspaces=4, avf_hidden=32, avf_depth=3,
            video_size=16, video_stages=2, video_channels=4, video_max_channels=16,
            embed_dim=8, codebook_size=32, video_heads=1, video_head_dim=8,
            teacher_dim=32, distill_hidden=32,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    seed: int = 0
    # data
    data_dir: str = "data"
    out_dir: str = "runs"
    n_train: int = 64
    n_val: int = 16
    n_test: int = 16
    clip_seconds: float = 2.0
    crop_seconds: float = 0.48
    noise_snr_db: float = math.inf
    # separation training
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    grad_clip: float = 5.0
    plateau_patience: int = 15
    early_stop: int = 30
    use_lambda_schedule: bool = True
    # video codec pretraining
    pretrain_steps: int = 50
    pretrain_batch: int = 4
    pretrain_patience: int = 20
    kmeans_restarts: int = 10
    video_weights: str = ""

    def save(self, path) -> None:
        from .fileio import atomic_write_text

        atomic_write_text(path, dump_config(self))


def _coerce(raw: str, typ, key: str):
    text = raw.strip()
    try:
        if typ is bool or typ == "bool":
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if typ is int or typ == "int":
            return int(text)
        if typ is float or typ == "float":
            return float(text)
        if typ is str or typ == "str":
            return text.strip('"')
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise ConfigError(f"unsupported type for {key}")


def _field_types(cls) -> dict[str, object]:
    return {f.name: f.type for f in fields(cls) if f.name != "model"}


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    model_types = _field_types(ModelConfig)
    run_types = _field_types(RunConfig)
    model_kw, run_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in model_kw or key in run_kw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key in model_types:
            model_kw[key] = _coerce(value, model_types[key], key)
        elif key in run_types:
            run_kw[key] = _coerce(value, run_types[key], key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return RunConfig(model=ModelConfig.toy(**model_kw), **run_kw)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    lines = ["# model"]
    for f in fields(ModelConfig):
        lines.append(f"{f.name} = {getattr(cfg.model, f.name)}")
    lines.append("# run")
    for f in fields(RunConfig):
        if f.name != "model":
            lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def replace_model(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **changes))
