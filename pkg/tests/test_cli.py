import csv
import json
import subprocess
import sys

import pytest

from mae_lab import cli, metrics

TINY = {
    "synth": {"n_participants": 10, "recordings_per_participant": 2, "n_frames": 64, "n_mels": 32},
    "mae": {"n_mels": 32, "n_frames": 64, "patch_size": 8, "encoder_dim": 16, "encoder_heads": 2,
            "decoder_dim": 16, "decoder_heads": 2, "batch_size": 4},
    "finetune": {"max_epochs": 2, "patience": 2, "batch_size": 8},
    "ablation": {"pretrain_epochs": 1, "seeds": [0, 1]},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = root / "run.json"
    conf.write_text(json.dumps(TINY))
    assert cli.main(["synth", "--config", str(conf), "--seed", "7", "--out", str(root / "corpus")]) == 0
    return root, conf


def _err(capsys):
    line = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(line)


def test_synth_is_deterministic(workspace, tmp_path):
    root, conf = workspace
    assert run("synth", "--config", conf, "--seed", 7, "--out", tmp_path) == 0
    assert (tmp_path / "manifest.jsonl").read_bytes() == (root / "corpus" / "manifest.jsonl").read_bytes()
    echo = json.loads((tmp_path / "resolved_config.json").read_text())
    assert echo["command"] == "synth" and echo["seed"] == 7 and echo["synth"]["seed"] == 7


def test_pretrain_finetune_report(workspace, capsys):
    root, conf = workspace
    manifest = root / "corpus" / "manifest.jsonl"
    pre = root / "pre"
    assert run("pretrain", "--config", conf, "--manifest", manifest, "--out", pre, "--epochs", 2) == 0
    assert (pre / "encoder.tgck").exists() and (pre / "decoder.tgck").exists()
    assert len((pre / "pretrain_log.jsonl").read_text().splitlines()) == 2

    enc_bytes = (pre / "encoder.tgck").read_bytes()
    ft = root / "ft"
    assert run("finetune", "--config", conf, "--manifest", manifest, "--encoder", pre / "encoder.tgck",
               "--out", ft, "--freeze-encoder") == 0
    assert (pre / "encoder.tgck").read_bytes() == enc_bytes
    assert not (ft / "encoder_finetuned.tgck").exists()
    rows = list(csv.reader((ft / "metrics.csv").open()))
    assert rows[0] == list(metrics.COLUMNS) and len(rows) == 2
    assert (ft / "head.tgck").exists()

    capsys.readouterr()
    echoed = (pre / "resolved_config.json").read_bytes()
    assert run("report", pre) == 0
    assert (pre / "resolved_config.json").read_bytes() == echoed
    out = capsys.readouterr().out
    assert "pretrain: epoch 2" in out
    curve = list(csv.reader((pre / "loss_curve.csv").open()))
    assert curve[0] == ["series", "epoch", "loss"] and len(curve) == 3


def test_finetune_random_init(workspace):
    root, conf = workspace
    out = root / "rand"
    assert run("finetune", "--config", conf, "--manifest", root / "corpus" / "manifest.jsonl",
               "--random-init", "--out", out) == 0
    assert (out / "encoder_finetuned.tgck").exists()


def test_ablate_single_cell(workspace, capsys):
    root, conf = workspace
    out = root / "abl"
    capsys.readouterr()
    assert run("ablate", "--config", conf, "--manifest", root / "corpus" / "manifest.jsonl", "--out", out,
               "--cells", "SSL-AST MA-Error+Norm+CA", "--seeds", 2) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == ",".join(metrics.COLUMNS)
    assert len(text.splitlines()) == 1 + 3
    assert run("report", "--out", out) == 0


@pytest.mark.parametrize("argv,kind", [
    (["synth", "--bogus"], "usage"),
    (["finetune", "--manifest", "nowhere.jsonl", "--random-init"], "missing_input"),
    (["pretrain"], "missing_input"),
    (["report", "no/such/dir"], "missing_input"),
])
def test_error_exit_codes(argv, kind, capsys, tmp_path):
    assert run(*argv, "--out", tmp_path / "o") == cli.EXIT_CODES[kind]
    assert _err(capsys)["error"] == kind


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mae": {"nope": 1}}))
    assert run("synth", "--config", bad, "--out", tmp_path) == cli.EXIT_CODES["config"]
    assert "nope" in _err(capsys)["message"]
    bad.write_text(json.dumps({"mae": {"mask_ratio": 1.5}}))
    assert run("synth", "--config", bad, "--out", tmp_path) == cli.EXIT_CODES["config"]
    bad.write_text("{not json")
    assert run("synth", "--config", bad, "--out", tmp_path) == cli.EXIT_CODES["config"]
    assert run("synth", "--config", tmp_path / "missing.json") == cli.EXIT_CODES["missing_input"]
    assert run("synth", "--seed", -1, "--out", tmp_path) == cli.EXIT_CODES["config"]


def test_distinct_exit_codes():
    assert len(set(cli.EXIT_CODES.values())) == len(cli.EXIT_CODES)


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mae_lab.cli", "report", str(tmp_path)],
                         capture_output=True, text=True, cwd=tmp_path)
    assert res.returncode == cli.EXIT_CODES["missing_input"]
    assert json.loads(res.stderr.strip())["error"] == "missing_input"
