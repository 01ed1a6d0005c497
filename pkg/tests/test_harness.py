import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from kaldex.backbone import BackboneConfig, UNetPlusPlus
from kaldex.harness import train as train_mod
from kaldex.harness.augment import augment
from kaldex.harness.checkpoint import load_checkpoint, load_into, save_checkpoint
from kaldex.harness.cli import main
from kaldex.harness.config import TrainConfig
from kaldex.harness.data import (
    DatasetSpec,
    build_patches,
    ingest,
    normalize,
    samples_from_arrays,
    split_indices,
)
from kaldex.harness.errors import CheckpointVersionError, ConfigError, DataError, NumericError
from kaldex.harness.plots import false_color_pixels, offset_vectors, plot_mask_diagram, plot_overlay
from kaldex.harness.predict import predict, predict_many
from kaldex.harness.synth import synth_generate
from kaldex.metrics import hard_skeleton

TINY = dict(depth=2, base_width=3, patch_size=16, stride=8)


# configuration

config_values = st.fixed_dictionaries({
    "learning_rate": st.floats(1e-8, 1.0), "weight_decay": st.floats(0, 1e-2),
    "epochs_main": st.integers(0, 50), "epochs_finetune": st.integers(0, 50),
    "batch_size": st.integers(1, 64), "seed": st.integers(0, 2**31 - 1),
    "alpha": st.floats(0, 1), "r": st.floats(1e-6, 10), "k": st.integers(1, 10),
    "val_fraction": st.floats(0, 0.9), "noise_sigma": st.floats(0, 1),
    "noise_mode": st.sampled_from(["smoothed", "blur"]), "flip": st.booleans(),
    "normalization": st.sampled_from(["standardize", "minmax"]),
    "ldca": st.sampled_from(["default", "none", "all"]), "head_prior": st.floats(0.001, 0.999),
})


@settings(max_examples=50, deadline=None)
@given(values=config_values)
def test_config_yaml_round_trip(values):
    cfg = TrainConfig(**values)
    assert TrainConfig.from_yaml(cfg.to_yaml()) == cfg


def test_config_defaults_and_errors(tmp_path):
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.weight_decay, cfg.epochs_main, cfg.epochs_finetune) == (1e-4, 1e-5, 10, 5)
    assert (cfg.alpha, cfg.r, cfg.k) == (0.4, 0.01, 5)
    for bad in ({"learning_rate": 0}, {"epochs_main": -1}, {"r": -1.0}, {"optimizer": "sgd"},
                {"base_width": 8}, {"patch_size": 40}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    with pytest.raises(ConfigError):
        TrainConfig.from_yaml("no_such_key: 1\n")
    cfg.save(tmp_path / "c.yaml")
    assert TrainConfig.load(tmp_path / "c.yaml") == cfg


# ingestion


def _save(path, arr, mode=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode).save(path)


def test_constant_rgb_standardizes_to_zeros(tmp_path):
    _save(tmp_path / "images" / "a.png", np.full((6, 7, 3), 120, np.uint8))
    _save(tmp_path / "masks" / "a.png", np.zeros((6, 7), np.uint8))
    (s,) = ingest(DatasetSpec(tmp_path, "synthetic"))
    assert s.image.shape == (6, 7) and (s.image == 0).all()


def test_luminance_and_standardization():
    img = np.random.default_rng(0).random((5, 5)) * 3 + 2
    out = normalize(img)
    assert abs(out.mean()) < 1e-6 and abs(out.std() - 1) < 1e-5
    mm = normalize(img, "minmax")
    assert mm.min() == 0 and mm.max() == 1


def test_drive_layout(tmp_path):
    g = np.random.default_rng(0)
    root = tmp_path / "DRIVE"
    for n in range(21, 41):
        _save(root / "training" / "images" / f"{n}_training.tif", g.integers(0, 255, (12, 10, 3), np.uint8))
        _save(root / "training" / "1st_manual" / f"{n}_manual1.gif", (g.random((12, 10)) > 0.8).astype(np.uint8) * 255)
        _save(root / "training" / "mask" / f"{n}_training_mask.gif", np.full((12, 10), 255, np.uint8))
    result = ingest(DatasetSpec(root, "drive", "training"))
    assert len(result) == 20 and not result.rejected
    for s in result:
        assert s.fov is not None and set(np.unique(s.mask)) <= {0, 1}


def test_mask_binarized_and_bad_files_reported(tmp_path):
    _save(tmp_path / "images" / "ok.png", np.zeros((4, 4), np.uint8))
    _save(tmp_path / "masks" / "ok.png", np.array([[0, 255, 128, 127]] * 4, np.uint8))
    _save(tmp_path / "images" / "big.png", np.zeros((5, 4), np.uint8))
    _save(tmp_path / "masks" / "big.png", np.zeros((4, 4), np.uint8))
    (tmp_path / "images" / "junk.png").write_bytes(b"not an image")
    _save(tmp_path / "masks" / "junk.png", np.zeros((4, 4), np.uint8))
    result = ingest(DatasetSpec(tmp_path, "synthetic"))
    assert [s.image_id for s in result] == ["ok"]
    np.testing.assert_array_equal(result.samples[0].mask[0], [0, 1, 1, 0])
    reasons = dict(result.rejected)
    assert "size mismatch" in reasons["big"] and "unreadable" in reasons["junk"]


def test_missing_root_and_layout():
    with pytest.raises(DataError):
        DatasetSpec("/nonexistent", "weird")
    with pytest.raises(DataError):
        ingest(DatasetSpec("/nonexistent/root", "synthetic"))


def test_split_is_seeded_partition():
    tr, va = split_indices(100, 0.1, 3)
    assert len(va) == 10 and len(tr) == 90
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(100))
    assert np.array_equal(split_indices(100, 0.1, 3)[1], va)


# augmentation


def test_augment_deterministic_and_flip_involution():
    g = np.random.default_rng(0)
    patch, mask = g.random((1, 8, 8)).astype(np.float32), (g.random((1, 8, 8)) > 0.5).astype(np.float32)
    a = augment(patch, mask, 7)
    b = augment(patch, mask, 7)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    once = augment(patch, mask, 11, sigma=0)
    twice = augment(*once, 11, sigma=0)
    assert np.array_equal(twice[0], patch) and np.array_equal(twice[1], mask)


def test_augment_zero_sigma_is_flip_only():
    g = np.random.default_rng(1)
    patch, mask = g.random((8, 8)).astype(np.float32), np.eye(8, dtype=np.float32)
    noisy = augment(patch, mask, 5, sigma=0.05)
    clean = augment(patch, mask, 5, sigma=0.0)
    flips = np.random.default_rng(5)
    h, v = flips.random() < 0.5, flips.random() < 0.5
    ref = patch[:, ::-1] if h else patch
    ref = ref[::-1] if v else ref
    assert np.array_equal(clean[0], ref)
    assert np.array_equal(noisy[1], clean[1])
    diff = noisy[0] - clean[0]
    assert 0 < np.abs(diff).max() < 0.1


def test_augment_blur_mode_keeps_mask():
    patch = np.zeros((9, 9), np.float32)
    patch[4, 4] = 1
    out, mask = augment(patch, np.eye(9), np.random.default_rng(0), sigma=0.05, mode="blur")
    assert mask.shape == (9, 9) and out.shape == (9, 9)


# synthetic data


def test_synth_deterministic_and_contract():
    a = synth_generate(3, 64, seed=4)
    b = synth_generate(3, 64, seed=4)
    for p, q in zip(a, b):
        assert np.array_equal(p.image, q.image) and np.array_equal(p.mask, q.mask)
    for p in a:
        assert 1.0 in p.widths
        assert all(1 <= w <= 4 for w in p.widths)
        assert hard_skeleton(p.mask).sum() > 0
        assert p.image.min() >= 0 and p.image.max() <= 1
    with pytest.raises(ValueError):
        synth_generate(0)


# checkpoint and predict


def _tiny_model(seed=0, **kw):
    torch.manual_seed(seed)
    return UNetPlusPlus(BackboneConfig(depth=2, base_width=3, patch_size=16, **kw))


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = _tiny_model()
    path = save_checkpoint(tmp_path / "m.kdx", model, phase="main", seed=0)
    loaded, manifest = load_checkpoint(path)
    x = torch.randn(2, 1, 16, 16)
    with torch.no_grad():
        assert torch.equal(model(x), loaded(x))
    assert manifest["phase"] == "main" and manifest["version"] == 1


def test_checkpoint_mismatch_errors(tmp_path):
    path = save_checkpoint(tmp_path / "m.kdx", _tiny_model())
    with pytest.raises(CheckpointVersionError):
        load_into(_tiny_model(ldca_sites=()), path)
    import json
    import zipfile

    bad = tmp_path / "old.kdx"
    with zipfile.ZipFile(path) as src, zipfile.ZipFile(bad, "w") as dst:
        for item in src.namelist():
            data = src.read(item)
            if item == "manifest.json":
                manifest = json.loads(data)
                manifest["version"] = 0
                data = json.dumps(manifest)
            dst.writestr(item, data)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(bad)


class ConstantModel(torch.nn.Module):
    def __init__(self, value=0.3):
        super().__init__()
        self.config = BackboneConfig(depth=2, base_width=3, patch_size=16)
        self.value = value

    def forward(self, x):
        return torch.full_like(x, self.value)


def test_predict_constant_model_has_no_seams():
    prob, mask = predict(ConstantModel(), np.zeros((50, 37), np.float32))
    assert prob.shape == (50, 37)
    assert np.abs(np.diff(prob, axis=0)).max() < 1e-6 and np.abs(np.diff(prob, axis=1)).max() < 1e-6
    assert not mask.any()


def test_predict_full_size_and_order():
    model = _tiny_model()
    g = np.random.default_rng(0)
    big = g.standard_normal((584, 565)).astype(np.float32)
    prob, mask = predict(model, big)
    assert prob.shape == mask.shape == (584, 565)
    assert mask.dtype == bool and ((prob >= 0) & (prob <= 1)).all()
    images = [g.standard_normal((20, 30)).astype(np.float32) for _ in range(3)]
    outs = predict_many(model, images)
    for im, (p, _) in zip(images, outs):
        assert np.array_equal(p, predict(model, im)[0])


# plots


def test_overlay_perfect_prediction_has_no_false_colour(tmp_path):
    g = np.random.default_rng(0)
    gt = g.random((20, 20)) > 0.7
    rgb = plot_overlay(g.random((20, 20)), gt, gt, tmp_path / "o.png")
    assert false_color_pixels(rgb) == 0 and (tmp_path / "o.png").exists()
    wrong = plot_overlay(g.random((20, 20)), ~gt, gt, tmp_path / "w.png")
    assert false_color_pixels(wrong) == 400


def test_zero_offsets_quiver():
    model = _tiny_model()
    x, y, u, v = offset_vectors(model, np.random.default_rng(0).standard_normal((16, 16)))
    assert len(x) > 0 and np.all(u == 0) and np.all(v == 0)


def test_two_blob_diagram_plot(tmp_path):
    m = np.zeros((8, 8))
    m[1:3, 1:3] = 1
    m[5:7, 5:7] = 1
    pts = plot_mask_diagram(m, tmp_path / "pd.png")
    assert sorted(map(tuple, pts.tolist())) == [(1.0, 0.0), (1.0, 0.0)]
    assert (tmp_path / "pd.png").stat().st_size > 0


def test_missing_artifact_message():
    from kaldex.harness.errors import MissingArtifactError
    from kaldex.harness.plots import plot_diagram

    with pytest.raises(MissingArtifactError, match="missing"):
        plot_diagram([None], "unused.png")
    with pytest.raises(MissingArtifactError):
        offset_vectors(_tiny_model(ldca_sites=()), np.zeros((16, 16)))


# training driver


@pytest.fixture(scope="module")
def tiny_samples():
    ph = synth_generate(4, 32, seed=1)
    return samples_from_arrays([p.image for p in ph], [p.mask for p in ph])


def _tiny_config(**kw):
    return TrainConfig(**{**TINY, "epochs_main": 1, "epochs_finetune": 0, "batch_size": 8, **kw})


def test_finetune_zero_returns_phase_one(tmp_path, tiny_samples):
    res = train_mod.train(_tiny_config(), tiny_samples, tmp_path)
    assert res.checkpoint == tmp_path / "main.kdx"
    loaded, manifest = load_checkpoint(res.checkpoint)
    assert manifest["phase"] == "main"
    x = torch.randn(1, 1, 16, 16)
    with torch.no_grad():
        assert torch.equal(loaded(x), res.model(x))
    assert (tmp_path / "curve.csv").read_text().startswith("phase,epoch,train_loss")


def test_training_is_reproducible(tmp_path, tiny_samples):
    a = train_mod.train(_tiny_config(epochs_finetune=1), tiny_samples, tmp_path / "a")
    b = train_mod.train(_tiny_config(epochs_finetune=1), tiny_samples, tmp_path / "b")
    assert [r["phase"] for r in a.history] == ["main", "finetune"]
    for ra, rb in zip(a.history, b.history):
        assert abs(ra["val_dice"] - rb["val_dice"]) <= 1e-6
    assert (tmp_path / "a" / "finetune.kdx").exists()


def test_divergence_aborts_with_last_good(tmp_path, tiny_samples, monkeypatch):
    monkeypatch.setattr(train_mod, "training_loss", lambda p, *a, **k: p.sum() * float("nan"))
    with pytest.raises(NumericError):
        train_mod.train(_tiny_config(), tiny_samples, tmp_path)
    load_checkpoint(tmp_path / "last_good.kdx")


def test_empty_dataset_rejected(tmp_path):
    with pytest.raises(DataError):
        train_mod.train(_tiny_config(), [], tmp_path)


def test_build_patches_shapes(tiny_samples):
    ps = build_patches(tiny_samples, 16, 8)
    assert ps.images.shape[1:] == (1, 16, 16) and len(ps) == 4 * 9


# CLI exit codes


def test_cli_exit_codes(tmp_path, monkeypatch):
    monkeypatch.setenv("KALDEX_OUTPUT_DIR", str(tmp_path / "out"))
    assert main(["synth", "--n", "2", "--size", "32"]) == 0
    assert (tmp_path / "out" / "images" / "phantom_000.png").exists()
    assert main(["train", "--data", str(tmp_path / "missing")]) == 3
    assert main(["train", "--data", str(tmp_path / "out"), "--learning-rate", "-1"]) == 2
    assert main(["predict", "--data", str(tmp_path / "out"), "--checkpoint", str(tmp_path / "none.kdx")]) == 6
