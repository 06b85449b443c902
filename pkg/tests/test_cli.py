import json

import pytest

from mt4ssl.cli import main

TOML = """preset = "desk"
[train]
total_steps = 3
batch_size = 2
max_frames = 40
[kmeans]
num_clusters = 4
restarts = 1
[synth]
n_utts = 6
min_seconds = 0.5
max_seconds = 1.0
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "desk.toml"
    cfg.write_text(TOML)
    run = lambda *a: main([str(x) for x in a])  # noqa: E731
    assert run("synth-data", "--config", cfg, "--out", d / "corpus") == 0
    man = d / "corpus" / "manifest.tsv"
    assert run("features", "--config", cfg, "--manifest", man, "--out", d / "feats.npz") == 0
    assert run("kmeans-train", "--config", cfg, "--features", d / "feats.npz", "--out", d / "cb.mt4k") == 0
    assert run("kmeans-label", "--features", d / "feats.npz", "--codebook", d / "cb.mt4k", "--out", d / "labels.txt") == 0
    assert run("pretrain", "--config", cfg, "--manifest", man, "--labels", d / "labels.txt", "--out-dir", d / "run") == 0
    return d, cfg, run


def test_pretrain_outputs(pipeline):
    d, _, _ = pipeline
    recs = [json.loads(x) for x in (d / "run/metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2, 3]
    assert (d / "run/checkpoint.mt4s").read_bytes()[:4] == b"MT4S"


def test_effective_config_echo(pipeline, capsys):
    d, cfg, run = pipeline
    assert run("synth-data", "--config", cfg, "--out", d / "echo", "--n-utts", "1") == 0
    err = capsys.readouterr().err
    body = json.loads(err.split("# effective config\n", 1)[1])
    assert body["train"]["total_steps"] == 3 and body["preset"] == "desk"


def test_seed_env_override(pipeline, capsys, monkeypatch):
    d, cfg, run = pipeline
    monkeypatch.setenv("MT4SSL_SEED", "42")
    assert run("synth-data", "--config", cfg, "--out", d / "seeded", "--n-utts", "1") == 0
    assert json.loads(capsys.readouterr().err.split("\n", 1)[1])["train"]["seed"] == 42


def test_inspect(pipeline, capsys):
    d, _, run = pipeline
    assert run("inspect-checkpoint", d / "run/checkpoint.mt4s") == 0
    out = capsys.readouterr().out
    assert "version: 1" in out and "step: 3" in out and "crc32: ok" in out
    assert "student/head_f.weight  [4, 64]" in out


def test_inspect_corrupt(pipeline, tmp_path, capsys):
    d, _, run = pipeline
    data = bytearray((d / "run/checkpoint.mt4s").read_bytes())
    data[100] ^= 1
    (tmp_path / "bad.mt4s").write_bytes(bytes(data))
    assert run("inspect-checkpoint", tmp_path / "bad.mt4s") == 2
    assert "MISMATCH" in capsys.readouterr().out


def test_resume(pipeline):
    d, cfg, run = pipeline
    args = ("pretrain", "--config", cfg, "--manifest", d / "corpus/manifest.tsv", "--labels", d / "labels.txt")
    assert run(*args, "--out-dir", d / "resumed", "--steps", 5, "--resume", d / "run/checkpoint.mt4s") == 2  # total_steps differs
    assert run(*args, "--out-dir", d / "resumed", "--resume", d / "run/checkpoint.mt4s") == 0
    assert (d / "resumed/checkpoint.mt4s").read_bytes() == (d / "run/checkpoint.mt4s").read_bytes()


def test_online_only_without_labels(pipeline):
    d, cfg, run = pipeline
    assert run("pretrain", "--config", cfg, "--manifest", d / "corpus/manifest.tsv", "--mode", "online_only", "--out-dir", d / "on") == 0
    assert run("pretrain", "--config", cfg, "--manifest", d / "corpus/manifest.tsv", "--mode", "combined", "--out-dir", d / "x") == 2


def test_probe(pipeline, capsys):
    d, _, run = pipeline
    assert run("probe", "--checkpoint", d / "run/checkpoint.mt4s", "--manifest", d / "corpus/manifest.tsv", "--baseline") == 0
    res = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0 <= res["accuracy"] <= 1 and 0 <= res["untrained_accuracy"] <= 1


def test_plot(pipeline):
    d, _, run = pipeline
    assert run("plot-metrics", d / "run/metrics.jsonl", "--out", d / "curves.svg") == 0
    assert (d / "curves.svg").read_text().lstrip().startswith("<?xml")


def test_feature_kind_mismatch(pipeline, capsys):
    d, cfg, run = pipeline
    cfg39 = d / "d39.toml"
    cfg39.write_text(TOML + "[features]\ndeltas = true\n")
    assert run("features", "--config", cfg39, "--manifest", d / "corpus/manifest.tsv", "--out", d / "f39.npz") == 0
    assert run("kmeans-label", "--features", d / "f39.npz", "--codebook", d / "cb.mt4k", "--out", d / "l39.txt") == 2
    assert "feature_kind mismatch" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["pretrain", "--bogus"], ["inspect-checkpoint"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_file_is_runtime_error(tmp_path):
    assert main(["inspect-checkpoint", str(tmp_path / "nope.mt4s")]) == 2


def test_help():
    assert main(["--help"]) == 0
