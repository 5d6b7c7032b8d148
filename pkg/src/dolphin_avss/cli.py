"""Command-line entry point. Exit codes: 0 success, 1 input error, 2 internal error."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, dump_config, load_config
from .fileio import FormatError, atomic_write_text, load_tensors, load_weights, read_wav, save_weights, write_wav
from .numerics import ConfigError

log = logging.getLogger("dolphin_avss")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _load_video(path) -> torch.Tensor:
    tensors = load_tensors(path)
    if "video" not in tensors:
        raise FormatError(f"{path}: no 'video' entry")
    video = tensors["video"].to(torch.float32)
    if video.dim() == 3:
        video = video[None]
    if video.dim() != 4 or video.shape[0] != 1:
        raise FormatError(f"{path}: video must be [T, H, W] or [1, T, H, W], got {tuple(video.shape)}")
    return video


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------

def cmd_separate(args) -> int:
    from .pipeline import build_model

    cfg = _config(args)
    model = build_model(cfg.model, cfg.seed)
    load_weights(model, args.weights)
    model.eval()
    wav, _ = read_wav(args.mix)
    videos = [_load_video(p) for p in args.video.split(",") if p]
    if not videos:
        raise ValueError("--video needs at least one file")
    out = Path(args.out)
    with torch.no_grad():
        estimates = model.separate_multi(wav[None], [v[None] for v in videos])
    for i, est in enumerate(estimates, 1):
        write_wav(out / f"target_{i}.wav", est[0])
    print(f"wrote {len(estimates)} waveform(s) to {out}")
    return 0


def _ensure_data(cfg: RunConfig, data_dir: Path):
    from .datagen import make_dataset, read_manifest

    manifest = data_dir / "manifest.jsonl"
    if not manifest.exists():
        make_dataset(data_dir, cfg.n_train, cfg.n_val, cfg.n_test, cfg.clip_seconds, cfg.noise_snr_db)
    return read_manifest(manifest)


def cmd_pretrain_video(args) -> int:
    from .pipeline import collect_videos, pretrain_lipcoder

    cfg = _config(args)
    if args.steps is not None:
        cfg.pretrain_steps = args.steps
    entries = _ensure_data(cfg, Path(args.data or cfg.data_dir))
    result = pretrain_lipcoder(cfg, collect_videos(entries), out_dir=args.out)
    first, last = result.eval_losses[0][1], result.eval_losses[-1][1]
    print(f"pretraining loss on the fixed batch: {first:.4f} -> {last:.4f}; weights in {Path(args.out) / 'lipcoder.dlph'}")
    return 0


def cmd_train(args) -> int:
    from .pipeline import build_model, collect_videos, pretrain_lipcoder, train_separation

    cfg = _config(args)
    if args.steps is not None:
        cfg.steps = args.steps
    out = Path(args.out)
    entries = _ensure_data(cfg, Path(args.data or cfg.data_dir))
    model = build_model(cfg.model, cfg.seed)
    if cfg.video_weights:
        load_weights(model.lipcoder, cfg.video_weights)
    else:
        pre = pretrain_lipcoder(cfg, collect_videos(entries), out_dir=out)
        model.lipcoder.load_state_dict(pre.lipcoder.state_dict())
    model.freeze_lipcoder()
    result = train_separation(cfg, entries, model, out_dir=out)
    save_weights(result.model, out / "model.dlph")
    summary = {"steps": result.steps, "test_sisnri": result.test["sisnri"], "test_sdri": result.test["sdri"]}
    atomic_write_text(out / "metrics.json", json.dumps(summary, indent=2) + "\n")
    atomic_write_text(out / "run.cfg", dump_config(cfg))
    print(json.dumps(summary))
    return 0


def cmd_bench(args) -> int:
    from .pipeline import build_model
    from .profiler import efficiency_report

    cfg = _config(args)
    model = build_model(cfg.model, cfg.seed).eval()
    report = efficiency_report(model, args.seconds, args.runs, args.warmups)
    text = report.to_markdown() if args.format == "md" else report.to_csv()
    if args.out:
        atomic_write_text(args.out, text)
    print(text, end="")
    return 0


def cmd_hda_demo(args) -> int:
    from .hda import edge_preservation_report

    columns, report = edge_preservation_report(args.T, args.k, args.alpha, args.sigma, args.kernel_len, args.seed)
    rows = zip(*(columns[k] for k in ("position", "input", "heat_diffusion", "gaussian")))
    text = _csv_text(("position", "input", "heat_diffusion", "gaussian"),
                     ((int(p), f"{a:.9g}", f"{b:.9g}", f"{c:.9g}") for p, a, b, c in rows))
    out = Path(args.out)
    atomic_write_text(out, text)
    report_path = out.with_name(out.stem + "_report.json")
    atomic_write_text(report_path, json.dumps(report, indent=2) + "\n")
    print(json.dumps(report, indent=2))
    return 0


def cmd_grad_check(args) -> int:
    from .checks import check_whole_model, layer_checks

    checks = layer_checks()
    checks["whole_model"] = check_whole_model
    names = list(checks) if args.layer == "all" else args.layer.split(",")
    unknown = [n for n in names if n not in checks]
    if unknown:
        raise ValueError(f"unknown layer(s) {unknown}; choose from {', '.join(checks)}")
    failed = []
    for name in names:
        report = checks[name]()
        print(f"{'PASS' if report.passed else 'FAIL'} {name}: max relative error {report.max_relative_error:.3e}")
        if not report.passed:
            failed.append(name)
            print(report)
    return 2 if failed else 0


def cmd_gen_data(args) -> int:
    from .datagen import make_dataset

    snr = math.inf if args.noise_snr is None else args.noise_snr
    path = make_dataset(args.out, args.n_train, args.n_val, args.n_test, args.clip_seconds, snr,
                        args.seed_base, write_files=args.write_files)
    print(f"manifest: {path}")
    return 0


def cmd_eval(args) -> int:
    from .datagen import read_manifest
    from .losses import sdri, sisnri

    manifest = Path(args.manifest)
    root = manifest.parent
    entries = [e for e in read_manifest(manifest) if args.split in ("all", e["split"])]
    model = None
    if args.weights:
        from .pipeline import build_model

        cfg = _config(args)
        model = build_model(cfg.model, cfg.seed)
        load_weights(model, args.weights)
        model.eval()
    elif not args.est_dir:
        raise ValueError("eval needs --est-dir or --weights")
    rows = []
    for e in entries:
        if "mix" not in e:
            raise ValueError(f"manifest row {e['split']}/{e['index']} has no audio files (run gen-data --write-files)")
        mix, _ = read_wav(root / e["mix"])
        ref, _ = read_wav(root / e["s1"])
        if model is not None:
            with torch.no_grad():
                est = model(mix[None], _load_video(root / e["v1"])[None])[0][0]
        else:
            est, _ = read_wav(Path(args.est_dir) / e["s1"])
        ref64, est64, mix64 = ref.double(), est.double(), mix.double()
        rows.append((e["split"], e["index"], float(sisnri(ref64, est64, mix64)), float(sdri(ref64, est64, mix64))))
    if not rows:
        raise ValueError("no manifest rows selected")
    mean = ("mean", len(rows), float(np.mean([r[2] for r in rows])), float(np.mean([r[3] for r in rows])))
    text = _csv_text(("split", "index", "sisnri_db", "sdri_db"),
                     [(a, b, f"{c:.4f}", f"{d:.4f}") for a, b, c, d in rows + [mean]])
    if args.out:
        atomic_write_text(args.out, text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dolphin-avss", description="Audio-visual target speaker separation toolkit.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    s = sub.add_parser("separate", help="extract one waveform per target video")
    s.add_argument("--mix", required=True)
    s.add_argument("--video", required=True, help="comma-separated video tensor files")
    s.add_argument("--weights", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_separate)

    for name, func in (("train-toy", cmd_train), ("pretrain-video-toy", cmd_pretrain_video)):
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--data", help="dataset directory (generated if no manifest exists)")
        s.add_argument("--out", required=True)
        s.add_argument("--steps", type=int)
        s.add_argument("--seed", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("bench", help="parameters, MACs and latency")
    s.add_argument("--config")
    s.add_argument("--seconds", type=float, default=1.0)
    s.add_argument("--runs", type=int, default=20)
    s.add_argument("--warmups", type=int, default=5)
    s.add_argument("--format", choices=("csv", "md"), default="csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("hda-demo", help="heat diffusion vs Gaussian smoothing on an impulsive signal")
    s.add_argument("--T", type=int, default=256)
    s.add_argument("--k", type=float, default=1.2)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--sigma", type=float, default=2.0)
    s.add_argument("--kernel-len", type=int, default=21)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_hda_demo)

    s = sub.add_parser("grad-check", help="finite-difference gradient verification")
    s.add_argument("--layer", default="all", help="comma-separated layer names or 'all'")
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("gen-data", help="write a synthetic corpus manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=64)
    s.add_argument("--n-val", type=int, default=16)
    s.add_argument("--n-test", type=int, default=16)
    s.add_argument("--clip-seconds", type=float, default=2.0)
    s.add_argument("--noise-snr", type=float)
    s.add_argument("--seed-base", type=int, default=0)
    s.add_argument("--write-files", action="store_true")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("eval", help="SI-SNRi / SDRi over a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--est-dir", help="directory of estimates named like the reference files")
    s.add_argument("--weights")
    s.add_argument("--config")
    s.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except SystemExit as err:  # --help
        return 0 if err.code in (0, None) else 1
    try:
        return args.func(args)
    except (ConfigError, FormatError, ValueError, FileNotFoundError, IsADirectoryError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
