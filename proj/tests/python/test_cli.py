import json
import os
import subprocess

import numpy as np
import pytest

CLI = os.environ.get("BRNPA_CLI")
pytestmark = pytest.mark.skipif(not CLI, reason="BRNPA_CLI not set")


def run(*args, cwd=None):
    return subprocess.run([CLI, *map(str, args)], capture_output=True, text=True, cwd=cwd)


def write_npy_volume(path, seed):
    np.save(path, np.abs(np.random.default_rng(seed).normal(size=(2, 6, 5, 5))))


def test_extract_is_deterministic(tmp_path):
    src = tmp_path / "vol.npy"
    write_npy_volume(src, 0)
    outs = []
    for name in ["a", "b"]:
        r = run("extract", "--input", src, "--batch-index", 1, "--n", 3, "--out-dir", tmp_path / name, "--seed", 4)
        assert r.returncode == 0, r.stderr
        assert r.stdout.startswith("selected: ")
        outs.append(r.stdout)
    assert outs[0] == outs[1]
    for f in ["manifest.json", "features.npav", "attention.npav"]:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["command"] == "extract"
    assert manifest["seed"] == 4
    assert manifest["arguments"]["batch_index"] == 1


def test_render_and_sparsity_round_trip(tmp_path):
    src = tmp_path / "vol.npy"
    write_npy_volume(src, 1)
    assert run("extract", "--input", src, "--out-dir", tmp_path / "e").returncode == 0
    stack = tmp_path / "e" / "attention.npav"
    r = run("render", "--volume", src, "--stack", stack, "--scale", 3, "--out-dir", tmp_path / "r")
    assert r.returncode == 0, r.stderr
    ppm = (tmp_path / "r" / "render.ppm").read_bytes()
    assert ppm.startswith(b"P6\n15 15\n255\n")
    r = run("sparsity", "--volume", src, "--stack", stack, "--out-dir", tmp_path / "s")
    assert r.returncode == 0
    assert json.loads(r.stdout)["s"] >= 1.0


def test_exit_codes(tmp_path):
    assert run("extract", "--input", tmp_path / "missing.npav", "--out-dir", tmp_path).returncode == 2
    bad = tmp_path / "bad.npav"
    bad.write_bytes(b"junk")
    assert run("extract", "--input", bad, "--out-dir", tmp_path).returncode == 2
    src = tmp_path / "vol.npy"
    write_npy_volume(src, 2)
    assert run("extract", "--input", src, "--n", 99, "--out-dir", tmp_path).returncode == 3
    assert run("extract", "--bogus").returncode == 3
    assert run("train", "--out-dir", tmp_path).returncode == 3
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"strides": [2, 2, 2, 3], "channels": [4, 4, 4, 4]}}))
    r = run("train", "--config", cfg, "--out-dir", tmp_path)
    assert r.returncode == 3 and "model.strides[3]" in r.stderr


def test_gen_data_writes_npy(tmp_path):
    r = run("gen-data", "--train", 6, "--test", 3, "--image-size", 16, "--out-dir", tmp_path, "--seed", 2)
    assert r.returncode == 0, r.stderr
    images = np.load(tmp_path / "train_images.npy")
    labels = np.load(tmp_path / "train_labels.npy")
    assert images.shape == (6, 1, 16, 16)
    assert sorted(np.bincount(labels.astype(int))) == [2, 2, 2]


def test_train_seed_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "data": {"train": 6, "test": 3, "image_size": 16},
        "model": {"input_size": 16, "channels": [4, 4, 4, 4], "strides": [2, 2, 1, 1]},
        "epochs": 1, "batch_size": 3, "seed": 0,
    }))
    r = run("train", "--config", cfg, "--seed", 7, "--out-dir", tmp_path / "t")
    assert r.returncode == 0, r.stderr
    manifest = json.loads((tmp_path / "t" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 7
    for f in ["metrics.jsonl", "model.ckpt", "summary.json"]:
        assert (tmp_path / "t" / f).exists()


def test_bench_zero_iterations(tmp_path):
    r = run("bench", "--shape", "4,3,3", "--iters", 0, "--out-dir", tmp_path)
    assert r.returncode == 0
    report = json.loads((tmp_path / "bench.json").read_text())
    assert report["npa"] is None and report["learned_attention"] is None
