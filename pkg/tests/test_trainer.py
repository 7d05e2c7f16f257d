import json
import os
from dataclasses import replace

import numpy as np
import pytest

from gvsr import srmodel, trainer
from gvsr.gradients import sobel_forward
from gvsr.gvloss import CompositeLossSpec
from gvsr.imagecore import load_png, to_grayscale
from gvsr.trainer import (
    SyntheticSetSpec,
    TrainConfig,
    ablation,
    bicubic_infer,
    desk_preset,
    evaluate,
    load_dataset,
    make_synthetic_dataset,
    parse_config_file,
    train,
    weights_sha256,
)

TINY_LOSS = CompositeLossSpec("l2", "gv", reg_weight=0.02, gv_patch=8)


def tiny_config(data_dir, **overrides):
    base = dict(
        train_dir=os.path.join(data_dir, "train"),
        val_dir=os.path.join(data_dir, "val"),
        loss=TINY_LOSS,
        seed=0,
        scale=2,
        epochs=1,
        batch=4,
        crop=32,
        lr_rate=1e-3,
        model="shuffle",
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    make_synthetic_dataset(SyntheticSetSpec(count=6, size=48, seed=3), os.path.join(root, "train"))
    make_synthetic_dataset(SyntheticSetSpec(count=2, size=48, seed=4), os.path.join(root, "val"))
    return str(root)


def test_dataset_determinism(tmp_path):
    spec = SyntheticSetSpec(count=3, size=48, seed=11)
    a = tmp_path / "a"
    b = tmp_path / "b"
    manifest_a = make_synthetic_dataset(spec, a)
    manifest_b = make_synthetic_dataset(spec, b)
    assert manifest_a == manifest_b
    for name in manifest_a["files"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    other = tmp_path / "c"
    make_synthetic_dataset(SyntheticSetSpec(count=3, size=48, seed=12), other)
    assert (a / "img_0000.png").read_bytes() != (other / "img_0000.png").read_bytes()


def test_dataset_guarantees_strong_edge(tmp_path):
    spec = SyntheticSetSpec(count=5, size=48, seed=7)
    manifest = make_synthetic_dataset(spec, tmp_path)
    for name in manifest["files"]:
        luma = to_grayscale(load_png(tmp_path / name))[0]
        gx, _ = sobel_forward(luma)
        # The dark/bright block promises a step of at least 0.5 in luma,
        # which the kernel amplifies by 4 across the interior of the edge.
        assert np.abs(gx).max() >= 1.0, name


def test_dataset_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSetSpec(count=-1)
    with pytest.raises(ValueError):
        SyntheticSetSpec(count=1, size=16)
    with pytest.raises(ValueError):
        SyntheticSetSpec(count=1, min_shapes=5, max_shapes=4)


def test_load_dataset_sorted_and_skips(tmp_path):
    make_synthetic_dataset(SyntheticSetSpec(count=3, size=48, seed=0), tmp_path)
    (tmp_path / "broken.png").write_bytes(b"not a png at all")
    (tmp_path / "notes.txt").write_text("ignored")
    with pytest.warns(UserWarning, match="broken.png"):
        pairs, skipped = load_dataset(tmp_path)
    assert [name for name, _ in pairs] == ["img_0000.png", "img_0001.png", "img_0002.png"]
    assert skipped == ["broken.png"]


def test_train_config_validation(tiny_data):
    with pytest.raises(ValueError):
        tiny_config(tiny_data, model="transformer")
    with pytest.raises(ValueError):
        tiny_config(tiny_data, scale=1)
    with pytest.raises(ValueError):
        tiny_config(tiny_data, batch=0)
    with pytest.raises(ValueError):
        tiny_config(tiny_data, crop=30)  # not divisible by patch 8
    with pytest.raises(ValueError):
        tiny_config(tiny_data, epochs=-1)


def test_train_writes_artifacts(tiny_data, tmp_path):
    config = tiny_config(tiny_data, out_dir=str(tmp_path / "run"))
    params, reports = train(config)
    assert params.step == 2  # 6 images / batch 4 -> 2 optimizer steps
    assert len(reports) == 1
    out = tmp_path / "run"
    assert (out / "model.ckpt").exists()
    loaded = srmodel.load_checkpoint(out / "model.ckpt")
    assert weights_sha256(loaded) == weights_sha256(params)
    csv = (out / "epochs.csv").read_text()
    assert csv.splitlines()[0] == "epoch,train_loss,val_psnr,val_ssim,sr_var_x,sr_var_y"
    assert len(csv.splitlines()) == 2
    manifest = json.loads((out / "run.json").read_text())
    assert manifest["seed"] == 0
    assert manifest["model"] == "shuffle"
    assert manifest["loss"]["reg_weight"] == 0.02
    assert "init_sha256" in manifest


def test_train_is_deterministic(tiny_data):
    a, _ = train(tiny_config(tiny_data))
    b, _ = train(tiny_config(tiny_data))
    assert weights_sha256(a) == weights_sha256(b)
    c, _ = train(tiny_config(tiny_data, seed=1))
    assert weights_sha256(a) != weights_sha256(c)


def test_zero_epochs_returns_init(tiny_data, tmp_path):
    config = tiny_config(tiny_data, epochs=0, out_dir=str(tmp_path / "zero"))
    params, reports = train(config)
    assert params.step == 0
    assert reports == []
    assert (tmp_path / "zero" / "model.ckpt").exists()


def test_residual_model_kind_trains(tiny_data):
    params, _ = train(tiny_config(tiny_data, model="residual"))
    assert params.kind == "residual"
    assert params.specs[-1].out_ch == 3


def test_train_rejects_missing_or_small_data(tiny_data, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ValueError, match="no training images"):
        train(tiny_config(tiny_data, train_dir=str(empty)))
    with pytest.raises(ValueError, match="smaller than crop"):
        train(tiny_config(tiny_data, crop=64))


def test_non_finite_abort_writes_last_good(tiny_data, tmp_path):
    out = tmp_path / "abort"
    config = tiny_config(tiny_data, epochs=3, lr_rate=float("inf"), out_dir=str(out))
    with pytest.raises(srmodel.NonFiniteError):
        train(config)
    rescued = srmodel.load_checkpoint(out / "last_good.ckpt")
    assert all(np.isfinite(w).all() for w in rescued.weights)


def test_evaluate_with_bicubic_baseline(tiny_data):
    report, pools = evaluate(bicubic_infer(2), os.path.join(tiny_data, "val"), 2, 8)
    assert len(report.rows) == 2
    assert report.skipped == []
    assert all(np.isfinite(r.psnr_db) and 0 < r.ssim <= 1 for r in report.rows)
    patches_per_image = (48 // 8) ** 2
    assert pools["sr_vx"].shape == (2 * patches_per_image,)
    assert pools["hr_vy"].shape == (2 * patches_per_image,)


def test_evaluate_with_model_params(tiny_data):
    params, _ = train(tiny_config(tiny_data))
    report, _ = evaluate(params, os.path.join(tiny_data, "val"), 2, 8)
    assert len(report.rows) == 2


def test_ablation_table(tiny_data, tmp_path):
    out = tmp_path / "grid"
    rows = ablation(tiny_config(tiny_data), ("l2", "l2+gv"), str(out))
    assert [r["loss"] for r in rows] == ["l2", "l2+gv", "hr"]
    csv_lines = (out / "ablation.csv").read_text().splitlines()
    assert csv_lines[0] == "loss,psnr_db,ssim,var_x,var_y"
    assert len(csv_lines) == 4
    manifest = json.loads((out / "ablation.json").read_text())
    assert manifest["complete"] is True
    # Identical seed means every row starts from identical weights.
    assert manifest["init_sha256"]["l2"] == manifest["init_sha256"]["l2+gv"]
    with pytest.raises(ValueError):
        ablation(tiny_config(tiny_data), (), str(out))


def test_desk_preset_configuration(tmp_path):
    config = desk_preset(str(tmp_path), seed=0)
    assert (config.scale, config.loss.gv_patch, config.epochs) == (2, 8, 30)
    assert config.loss.name == "l2+gv"
    assert config.loss.reg_weight == 0.02
    assert config.model == "residual"
    assert (config.batch, config.crop, config.lr_rate) == (8, 64, 1e-3)
    train_manifest = json.loads((tmp_path / "train" / "manifest.json").read_text())
    val_manifest = json.loads((tmp_path / "val" / "manifest.json").read_text())
    assert train_manifest["count"] + val_manifest["count"] == 200
    assert trainer.DESK_GRID == ("l2", "l2+tv", "l2+gv", "l1", "l1+gv", "ssim", "ssim+gv")


def test_parse_config_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("# comment\nseed = 5\nloss=l1+gv  # trailing\n\nlr=0.002\n")
    values = parse_config_file(path)
    assert values == {"seed": "5", "loss": "l1+gv", "lr": "0.002"}
    bad = tmp_path / "bad.conf"
    bad.write_text("seed 5\n")
    with pytest.raises(ValueError, match="bad.conf:1"):
        parse_config_file(bad)


def test_default_patch():
    assert trainer.default_patch(2) == 8
    assert trainer.default_patch(3) == 16
    assert trainer.default_patch(4) == 16
