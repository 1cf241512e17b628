"""Command-line interface: exit codes, wiring, provenance embedding."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from procap.cli import main


def run_cli(args):
    return main(args)


def test_help_exits_zero():
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0


def test_unknown_subcommand_exits_two():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2


def test_missing_required_flag_exits_two(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--kb", "x", "--out", "y"])
    assert e.value.code == 2
    assert "--data" in capsys.readouterr().err


def test_domain_error_exits_one(tmp_path, capsys):
    rc = main(["pretrain-decoder", "--data", str(tmp_path / "missing.json"),
               "--out", str(tmp_path / "ck.bin")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def _config_file(tmp_path):
    cfg = {
        "seed": 3,
        "synth": {"n_scenes": 2, "n_sources": 2, "eval_fraction": 0.3, "seed": 3},
        "model": {"encoder_dim": 16, "refined_channels": 8, "seg_hidden": 4,
                  "query_dim": 16, "n_query_tokens": 4, "n_knowledge_tokens": 4,
                  "qformer_layers": 1, "qformer_heads": 2, "dec_dim": 16,
                  "dec_layers": 1, "dec_heads": 2, "top_k": 3},
        "train": {"warmup_steps": 1, "total_steps": 3, "batch_size": 2,
                  "pretrain_epochs": 5, "seed": 3},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_unknown_config_key_rejected(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"seed": 1, "banana": {}}))
    rc = main(["synth", "--config", str(path), "--out", str(tmp_path / "d")])
    assert rc == 1
    assert "banana" in capsys.readouterr().err


def test_full_cli_pipeline(tmp_path, capsys):
    cfgf = _config_file(tmp_path)
    data = str(tmp_path / "data")
    assert main(["synth", "--config", cfgf, "--out", data]) == 0
    manifest = os.path.join(data, "manifest.json")
    man = json.loads(open(manifest).read())
    assert man["config"]["seed"] == 3  # provenance embedded
    assert len(man["samples"]) == 4

    ck0 = str(tmp_path / "init.bin")
    assert main(["pretrain-decoder", "--config", cfgf, "--data", manifest, "--out", ck0]) == 0

    kbf = str(tmp_path / "kb.json")
    assert main(["kb", "build", "--checkpoint", ck0, "--manifest", manifest, "--out", kbf]) == 0
    kb_doc = json.loads(open(kbf).read())
    assert len(kb_doc["entries"]) == 2
    assert "config" in kb_doc

    outdir = str(tmp_path / "run")
    assert main(["train", "--config", cfgf, "--data", manifest, "--kb", kbf,
                 "--out", outdir, "--init", ck0]) == 0
    assert os.path.exists(os.path.join(outdir, "loss_log.csv"))
    ck = os.path.join(outdir, "checkpoint.bin")
    assert os.path.exists(ck)

    capsys.readouterr()
    img = os.path.join(data, man["samples"][0]["composite"])
    assert main(["caption", "--checkpoint", ck, "--kb", kbf, "--image", img,
                 "--task", "scene"]) == 0
    assert main(["caption", "--checkpoint", ck, "--kb", kbf, "--image", img,
                 "--task", "proj"]) == 0

    report = str(tmp_path / "report.json")
    assert main(["eval", "--checkpoint", ck, "--kb", kbf, "--data", manifest,
                 "--out", report]) == 0
    doc = json.loads(open(report).read())
    assert doc["meta"]["checkpoint"] == ck
    assert "results" in doc


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "procap.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "procap" in proc.stdout
