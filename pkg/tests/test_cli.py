import csv
import json

import pytest
import torch

from dolphin_avss.cli import main
from dolphin_avss.config import load_config
from dolphin_avss.datagen import read_manifest
from dolphin_avss.fileio import save_tensors, save_weights, write_wav
from dolphin_avss.pipeline import build_model
from dolphin_avss.profiler import count_model_macs, count_params

TINY = """\
n_audio = 8
heads = 1
head_dim = 4
ffn_hidden = 16
enc_gla = 1
dec_gla = 1
avf_hidden = 8
avf_depth = 2
n_train = 2
n_val = 1
n_test = 1
clip_seconds = 0.48
crop_seconds = 0.16
batch_size = 2
steps = 2
pretrain_steps = 2
pretrain_batch = 2
kmeans_restarts = 1
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def test_unknown_flag_prints_usage(capsys):
    assert main(["hda-demo", "--out", "x.csv", "--bogus", "1"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err and "--bogus" in err
    assert main(["no-such-command"]) == 1
    assert main([]) == 1


def test_hda_demo_csv(tmp_path):
    out = tmp_path / "demo.csv"
    assert main(["hda-demo", "--T", "256", "--k", "1.2", "--sigma", "2", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["position", "input", "heat_diffusion", "gaussian"]
    assert len(rows) == 257 and all(len(r) == 4 for r in rows)
    report = json.loads((tmp_path / "demo_report.json").read_text())
    assert report["heat_retention"] is not None and report["matched_gaussian_retention"] is not None
    first = out.read_bytes()
    assert main(["hda-demo", "--T", "256", "--k", "1.2", "--sigma", "2", "--out", str(out)]) == 0
    assert out.read_bytes() == first


def test_gen_data_and_oracle_eval(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--n-train", "1", "--n-val", "1", "--n-test", "2",
                 "--clip-seconds", "0.4", "--write-files"]) == 0
    entries = read_manifest(data / "manifest.jsonl")
    assert len(entries) == 4
    again = tmp_path / "again"
    main(["gen-data", "--out", str(again), "--n-train", "1", "--n-val", "1", "--n-test", "2",
          "--clip-seconds", "0.4", "--write-files"])
    assert (again / "manifest.jsonl").read_bytes() == (data / "manifest.jsonl").read_bytes()
    capsys.readouterr()
    out = tmp_path / "eval.csv"
    assert main(["eval", "--manifest", str(data / "manifest.jsonl"), "--est-dir", str(data), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["split"] for r in rows] == ["test", "test", "mean"]
    assert all(float(r["sisnri_db"]) >= 40 for r in rows)


def test_eval_needs_estimates(tmp_path):
    main(["gen-data", "--out", str(tmp_path), "--n-train", "0", "--n-val", "0", "--n-test", "1",
          "--clip-seconds", "0.4"])
    assert main(["eval", "--manifest", str(tmp_path / "manifest.jsonl"), "--est-dir", str(tmp_path)]) == 1


def test_bench_matches_profiler(tmp_path, tiny_cfg):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--config", str(tiny_cfg), "--seconds", "0.48", "--runs", "2", "--warmups", "1",
                 "--out", str(out)]) == 0
    values = dict(csv.reader(out.open()))
    model = build_model(load_config(tiny_cfg).model, 0).eval()
    macs = count_model_macs(model, 0.48)
    assert int(values["params_total"]) == count_params(model)
    assert int(values["macs.total"]) == macs["total"]
    assert int(values["macs.attention"]) == macs["attention"]
    md = tmp_path / "bench.md"
    assert main(["bench", "--config", str(tiny_cfg), "--runs", "0", "--format", "md", "--out", str(md)]) == 0
    assert md.read_text().startswith("| metric | value |")


def test_grad_check_command(capsys):
    assert main(["grad-check", "--layer", "ffn,tda_injection"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2
    assert main(["grad-check", "--layer", "nope"]) == 1


def test_separate(tmp_path, tiny_cfg):
    cfg = load_config(tiny_cfg)
    model = build_model(cfg.model, 0)
    save_weights(model, tmp_path / "w.dlph")
    write_wav(tmp_path / "mix.wav", torch.randn(1, 7680) * 0.1)
    for i in (1, 2):
        save_tensors(tmp_path / f"v{i}.bin", {"video": torch.rand(1, 12, 16, 16)})
    args = ["separate", "--mix", str(tmp_path / "mix.wav"), "--video", f"{tmp_path / 'v1.bin'},{tmp_path / 'v2.bin'}",
            "--weights", str(tmp_path / "w.dlph"), "--out", str(tmp_path / "out"), "--config", str(tiny_cfg)]
    assert main(args) == 0
    assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["target_1.wav", "target_2.wav"]
    save_tensors(tmp_path / "v2.bin", {"video": torch.rand(1, 11, 16, 16)})
    assert main(args) == 1
    assert main(args[:-2]) == 1  # weights do not fit the default toy model


def test_missing_file_is_input_error(tmp_path):
    assert main(["eval", "--manifest", str(tmp_path / "none.jsonl"), "--est-dir", "."]) == 1


def test_train_and_pretrain_toy(tmp_path, tiny_cfg):
    data = tmp_path / "data"
    assert main(["pretrain-video-toy", "--config", str(tiny_cfg), "--data", str(data), "--out", str(tmp_path / "v")]) == 0
    assert (tmp_path / "v" / "lipcoder.dlph").exists()
    out = tmp_path / "run"
    assert main(["train-toy", "--config", str(tiny_cfg), "--data", str(data), "--out", str(out), "--steps", "2"]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["steps"] == 2
    assert load_config(out / "run.cfg") == load_config(tiny_cfg).__class__(**{**load_config(tiny_cfg).__dict__, "steps": 2})
    assert (out / "model.dlph").exists()
