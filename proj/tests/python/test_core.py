import json
import os

import numpy as np
import pytest

import brnpa


def random_volume(seed, c=8, h=4, w=4):
    return np.random.default_rng(seed).normal(size=(c, h, w))


def test_extract_shapes_and_simplex():
    out = brnpa.extract_representatives(random_volume(0), n=3)
    assert out["features"].shape == (3, 8)
    assert out["attention"].shape == (3, 4, 4)
    np.testing.assert_allclose(out["attention"].sum(axis=(1, 2)), 1.0, atol=1e-12)
    assert (out["attention"] >= 0).all()
    assert len(set(out["selected"])) == 3


def test_first_pick_is_most_active():
    vol = random_volume(1)
    out = brnpa.extract_representatives(vol, n=1, refine=False)
    energy = (vol**2).sum(axis=0).ravel()
    assert out["selected"][0] == int(np.argmax(energy))
    np.testing.assert_array_equal(out["features"][0], vol.reshape(8, -1)[:, out["selected"][0]])


def test_refined_vector_is_weighted_average():
    vol = random_volume(2)
    out = brnpa.extract_representatives(vol, n=2)
    flat = vol.reshape(8, -1)
    for k in range(2):
        expected = flat @ out["attention"][k].ravel()
        np.testing.assert_allclose(out["features"][k], expected, atol=1e-12)


def test_random_selection_follows_seed():
    vol = random_volume(3, h=5, w=5)
    a = brnpa.extract_representatives(vol, selection="random", seed=9)
    b = brnpa.extract_representatives(vol, selection="random", seed=9)
    assert a["selected"] == b["selected"]


def test_errors_map_to_python_exceptions():
    with pytest.raises(brnpa.ValidationError):
        brnpa.extract_representatives(random_volume(0, h=1, w=2), n=3)
    with pytest.raises(brnpa.ShapeError):
        brnpa.extract_representatives(np.zeros((4, 4)))
    with pytest.raises(brnpa.ValidationError):
        brnpa.extract_representatives(random_volume(0), selection="greedy")
    assert issubclass(brnpa.ShapeError, brnpa.Error)


def test_sparsity_uniform_and_one_hot():
    vol = random_volume(4, c=3)
    vol /= np.linalg.norm(vol, axis=0, keepdims=True)
    uniform = np.full((1, 4, 4), 1 / 16)
    one_hot = np.zeros((1, 4, 4))
    one_hot[0, 1, 2] = 1.0
    assert brnpa.sparsity(uniform, vol)["s"] == pytest.approx(1.0, abs=1e-12)
    assert brnpa.sparsity(one_hot, vol)["s"] == pytest.approx(16.0, abs=1e-12)


def test_render_channels():
    vol = np.ones((2, 3, 3))
    maps = np.zeros((3, 3, 3))
    maps[0, 0, 0] = maps[1, 1, 1] = maps[2, 2, 2] = 1.0
    img = brnpa.render(maps, vol)
    assert img.shape == (3, 3, 3) and img.dtype == np.uint8
    assert tuple(img[0, 0]) == (255, 0, 0)
    assert tuple(img[1, 1]) == (0, 255, 0)
    assert tuple(img[2, 2]) == (0, 0, 255)
    assert tuple(img[0, 1]) == (0, 0, 0)


def test_distillation_loss_boundaries():
    rng = np.random.default_rng(5)
    s, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    labels = [0, 2, 1, 1]
    total, ce, kl = brnpa.distillation_loss(s, t, labels, 1.0)
    assert total == pytest.approx(ce, abs=1e-12)
    _, _, kl_same = brnpa.distillation_loss(s, s, labels, 0.5)
    assert kl_same == 0.0
    with pytest.raises(brnpa.ValidationError):
        brnpa.distillation_loss(s, t, labels, 1.5)


def test_generate_shapes_is_deterministic():
    a = brnpa.generate_shapes(seed=3, train=9, test=3)
    b = brnpa.generate_shapes(seed=3, train=9, test=3)
    np.testing.assert_array_equal(a["train"]["images"], b["train"]["images"])
    assert a["train"]["images"].shape == (9, 32, 32)
    assert sorted(np.bincount(a["train"]["labels"])) == [3, 3, 3]
    assert a["classes"] == ["disk", "square", "triangle"]


def test_tiny_training_run():
    cfg = {
        "data": {"seed": 0, "train": 12, "test": 6, "image_size": 16},
        "model": {"input_size": 16, "channels": [4, 4, 6, 6], "strides": [2, 2, 1, 1], "head": "npa"},
        "epochs": 2,
        "batch_size": 4,
        "learning_rate": 0.01,
        "seed": 1,
    }
    r = brnpa.train(json.dumps(cfg))
    assert len(r["log"]) == 2
    assert 0.0 <= r["test_accuracy"] <= 1.0
    assert json.loads(r["log"][0])["epoch"] == 1
    with pytest.raises(brnpa.ValidationError, match="model.strides"):
        cfg["model"]["strides"] = [2, 2, 3, 1]
        brnpa.train(json.dumps(cfg))


def test_pinned_configs_parse():
    root = os.environ.get("BRNPA_CONFIGS")
    if not root:
        pytest.skip("BRNPA_CONFIGS not set")
    for name in ["train_npa.json", "ablation.json", "rank_heads.json"]:
        cfg = json.load(open(os.path.join(root, name)))
        cfg["epochs"] = 0
        cfg["data"]["train"], cfg["data"]["test"] = 3, 3
        assert brnpa.train(json.dumps(cfg))["log"] == []


def test_pinned_configs_match_schema():
    jsonschema = pytest.importorskip("jsonschema")
    root = os.environ.get("BRNPA_CONFIGS")
    if not root:
        pytest.skip("BRNPA_CONFIGS not set")
    schema = json.load(open(os.path.join(root, "experiment.schema.json")))
    names = [n for n in sorted(os.listdir(root)) if n.endswith(".json") and n != "experiment.schema.json"]
    assert "distill.json" in names
    for name in names:
        jsonschema.validate(json.load(open(os.path.join(root, name))), schema)
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({"model": {"strides": [3]}}, schema)
