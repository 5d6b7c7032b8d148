"""Float64 finite-difference gradient checks for every trainable layer at micro sizes."""
from __future__ import annotations

import torch

from .attention import ConvFFN, CoarseSelfAttention, GABlock, MultiHeadSelfAttention
from .audiocodec import AudioDecoder, AudioEncoder
from .avf import AudioVisualFusion
from .config import ModelConfig
from .gla import GLABlock
from .hda import HeatDiffusionAttention
from .lipcoder import Res3dBlock, SEGate, SpatialAttentionBlock, VectorQuantizer
from .losses import total_loss
from .numerics import grad_check, init_parameters, module_params, relative_error
from .separator import GatedInjection, OutputHead

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3


def micro_config(**overrides) -> ModelConfig:
    base = dict(
        n_audio=8, q_levels=2, heads=2, head_dim=4, ffn_hidden=16, enc_gla=1, dec_gla=1,
        avf_subspaces=2, avf_hidden=8, avf_depth=2,
        video_size=8, video_stages=1, video_channels=2, video_max_channels=4, embed_dim=2,
        codebook_size=4, video_heads=1, video_head_dim=4, teacher_dim=4, distill_hidden=4,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _setup(module, seed):
    init_parameters(module, seed)
    gen = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        # non-zero biases so every bias gradient is exercised away from symmetric points
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.1 * torch.randn(p.shape, generator=gen))
    return module.double()


def _projection(shape, seed):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def check_module(module, inputs, seed: int = 0, tol: float = LAYER_TOL, output=lambda y: y, **kw):
    """Probe a module's parameters and inputs through ``sum(w * output(module(*inputs)))``."""
    module = _setup(module, seed)
    inputs = [x.detach().double().requires_grad_(True) for x in inputs]
    with torch.no_grad():
        w = _projection(output(module(*inputs)).shape, seed + 1)
    params = module_params(module)
    params.update({f"input{i}": x for i, x in enumerate(inputs)})
    return grad_check(lambda: (output(module(*inputs)) * w).sum(), params, tol=tol, seed=seed, **kw)


def _x(*shape, seed=0):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def check_vq_straight_through(seed: int = 0):
    """The gradient reaching ``z`` through the quantised output equals the
    (finite-difference verified) gradient w.r.t. the quantised tensor; the
    encoder term is checked against ``z`` and the codebook term against the codebook."""
    vq = VectorQuantizer(4, 3).double()
    rows = _x(6, 3, seed=seed).requires_grad_(True)
    w = _projection((6, 3), seed + 1)
    head = lambda q: (w * q).sum() + 0.5 * (q**2).sum()

    (via_st,) = torch.autograd.grad(head(vq(rows).quantized), rows)
    q = vq(rows).quantized.detach().clone().requires_grad_(True)
    report = grad_check(lambda: head(q), {"quantized": q}, tol=LAYER_TOL, seed=seed)
    (direct,) = torch.autograd.grad(head(q), q)
    err = relative_error(via_st.numpy(), direct.numpy(), 1e-8 / LAYER_TOL).max()
    report.per_parameter_errors["straight_through_identity"] = float(err)

    enc = grad_check(lambda: vq(rows).encoder_loss, {"rows": rows}, tol=LAYER_TOL, seed=seed)
    cb = grad_check(lambda: vq(rows).codebook_loss, {"codebook": vq.codebook}, tol=LAYER_TOL, seed=seed)
    report.per_parameter_errors["encoder_term.rows"] = enc.max_relative_error
    report.per_parameter_errors["codebook_term.codebook"] = cb.max_relative_error
    report.max_relative_error = max(report.per_parameter_errors.values())
    return report


def check_losses(seed: int = 0):
    ref = _x(2, 1, 1024, seed=seed)
    est = (ref + 0.5 * _x(2, 1, 1024, seed=seed + 1)).requires_grad_(True)
    est3 = (ref + 0.7 * _x(2, 1, 1024, seed=seed + 2)).requires_grad_(True)
    return grad_check(lambda: total_loss(ref, est, est3, lam=0.4), {"est": est, "est3": est3}, tol=LAYER_TOL, seed=seed)


def check_whole_model(seed: int = 0, tol: float = MODEL_TOL, length: int = 256, frames: int = 4):
    from .pipeline import DolphinModel

    cfg = micro_config()
    model = _setup(DolphinModel(cfg), seed)
    model.freeze_lipcoder()
    wav = _x(1, 1, length, seed=seed)
    target = _x(1, 1, length, seed=seed + 1)
    v_rec, v_sem = _x(1, cfg.visual_dim, frames, seed=seed + 2), _x(1, cfg.visual_dim, frames, seed=seed + 3)
    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    return grad_check(lambda: total_loss(target, model.forward_from_tokens(wav, v_rec, v_sem)[0], lam=0.0),
                      params, tol=tol, seed=seed, max_coords=4)


def layer_checks():
    """Name -> zero-argument callable returning a GradReport."""
    c, t = 8, 32
    return {
        "hda": lambda: check_module(HeatDiffusionAttention(c, 0.3), [_x(2, c, t)]),
        "mhsa": lambda: check_module(MultiHeadSelfAttention(c, 2, 4), [_x(2, c, t)]),
        "csa": lambda: check_module(CoarseSelfAttention(c, 2, 4, 2), [_x(2, c, t)]),
        "ffn": lambda: check_module(ConvFFN(c, 16), [_x(2, c, t)]),
        "ga_block": lambda: check_module(GABlock(c, 2, 4, 16, 1), [_x(2, c, t)]),
        "gla_block": lambda: check_module(GLABlock(c, 2, 4, 16, 2), [_x(2, c, t)]),
        "tda_injection": lambda: check_module(GatedInjection(c, "nearest"), [_x(2, c, t), _x(2, c, t // 4, seed=1)]),
        "tda_fuse_linear": lambda: check_module(GatedInjection(c, "linear"), [_x(2, c, t), _x(2, c, t // 2, seed=1)]),
        "output_head": lambda: check_module(OutputHead(c), [_x(2, c, t), _x(2, c, t, seed=1)]),
        # smaller step keeps the probe from straddling a ReLU kink
        "output_head_mask": lambda: check_module(OutputHead(c, True), [_x(2, c, t), _x(2, c, t, seed=1)], step=1e-6),
        "avf": lambda: check_module(
            AudioVisualFusion(12, c, 8, 2, 2), [_x(2, 12, 4), _x(2, 12, 4, seed=1), _x(2, c, t, seed=2)]),
        "audio_encoder": lambda: check_module(AudioEncoder(c, 16, 4), [_x(2, 1, 64)]),
        "audio_decoder": lambda: check_module(AudioDecoder(c, 16, 4), [_x(2, c, 16)]),
        "se_gate": lambda: check_module(SEGate(4), [_x(1, 4, 2, 4, 4)]),
        "res3d_block": lambda: check_module(Res3dBlock(4), [_x(1, 4, 2, 4, 4)]),
        "spatial_attention": lambda: check_module(SpatialAttentionBlock(4, 2, 4), [_x(1, 4, 2, 4, 4)]),
        "vq_straight_through": check_vq_straight_through,
        "losses": check_losses,
    }


def run_all(include_model: bool = True):
    reports = {name: fn() for name, fn in layer_checks().items()}
    if include_model:
        reports["whole_model"] = check_whole_model()
    return reports
