"""
Learning-rate schedule, optimizer and the training loop on the synthetic tone corpus
"""

import json
import logging
import math

import numpy as np
import pytest

import seeding
import train
from augment import AugmentPolicy
from conftest import TINY_SPEC
from dsp import DEFAULT_FRONTEND
from errors import ConfigError, DataError, NumericError
from evaluation import ConfusionCounts, macro_f1
from manifest import Manifest, Split
from nn import ModelSpec, build_resnet15, cross_entropy, load_checkpoint, predict_logits
from tensor import Tensor
from train import SGD, TrainConfig, fit, lr_schedule, warmup_steps
from uncertainty import UncertaintyConfig


def tiny_model(n_classes=2, seed=0, spec=TINY_SPEC):
    return build_resnet15(spec, n_classes, seeding.substream(seed, seeding.INIT))


def quick_cfg(**kw):
    values = {"epochs": 2, "batch_size": 50, "early_stop_patience": None}
    values.update(kw)
    return TrainConfig(**values)


def test_lr_schedule_points():
    cfg = TrainConfig()
    assert warmup_steps(1000, cfg) == 50
    assert lr_schedule(0, 1000, cfg) == 0.0
    assert lr_schedule(25, 1000, cfg) == pytest.approx(0.05)
    assert lr_schedule(50, 1000, cfg) == pytest.approx(0.1)
    assert lr_schedule(999, 1000, cfg) == pytest.approx(0.0, abs=1e-5)
    midway = 50 + 950 // 2
    assert lr_schedule(midway, 1000, cfg) == pytest.approx(0.05, abs=1e-3)
    with pytest.raises(ConfigError):
        lr_schedule(1000, 1000, cfg)


def test_lr_schedule_is_monotone_after_warmup():
    cfg = TrainConfig()
    values = [lr_schedule(s, 400, cfg) for s in range(400)]
    peak = warmup_steps(400, cfg)
    assert all(a <= b for a, b in zip(values[:peak], values[1:peak + 1]))
    assert all(a >= b for a, b in zip(values[peak:], values[peak + 1:]))


def test_sgd_weight_decay_only():
    w = Tensor(np.array([1.0]), requires_grad=True)
    w.grad = np.array([0.0])
    SGD([w], momentum=0.9, weight_decay=0.001).step(1.0)
    assert w.data[0] == pytest.approx(0.999)


def test_sgd_momentum_by_hand():
    w = Tensor(np.array([2.0]), requires_grad=True)
    opt = SGD({"w": w}, momentum=0.5, weight_decay=0.1)
    expected_w, v = 2.0, 0.0
    for g, lr in [(1.0, 0.1), (-2.0, 0.2), (0.5, 0.05)]:
        w.grad = np.array([g])
        v = 0.5 * v + g + 0.1 * expected_w
        expected_w -= lr * v
        opt.step(lr)
        assert w.data[0] == pytest.approx(expected_w, abs=1e-12)
    assert opt.steps == 3
    opt.zero_grad()
    assert w.grad is None


def test_sgd_missing_gradient_counts_as_zero():
    w = Tensor(np.array([1.0]), requires_grad=True)
    SGD([w], momentum=0.0, weight_decay=0.0).step(0.5)
    assert w.data[0] == 1.0


def test_sgd_refuses_non_finite_gradients():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([3.0]), requires_grad=True)
    a.grad = np.array([0.5, 0.5])
    b.grad = np.array([np.nan])
    with pytest.raises(NumericError):
        SGD([a, b]).step(0.1)
    np.testing.assert_array_equal(a.data, [1.0, 2.0])
    np.testing.assert_array_equal(b.data, [3.0])


def test_frozen_batch_loss_decreases(rng):
    model = tiny_model(n_classes=3)
    x = rng.standard_normal((12, 1, 10, 14)).astype(np.float32)
    labels = np.arange(12) % 3
    opt = SGD(model.named_parameters(), momentum=0.9, weight_decay=0.0)
    losses = []
    for _ in range(5):
        opt.zero_grad()
        loss = cross_entropy(model.forward(Tensor(x), training=True), labels)
        loss.backward()
        opt.step(0.05)
        losses.append(float(loss.data))
    assert losses[-1] < losses[0]


def test_fit_writes_artifacts(tmp_path, tone_corpus):
    _, manifest = tone_corpus
    model = tiny_model()
    seen = []
    report = fit(manifest, model, quick_cfg(), seed=0, run_dir=tmp_path, on_epoch=seen.append)
    assert report.epochs_run == 2
    assert len(report.history) == 4
    assert len(seen) == 2 and [r.split for r in seen[0]] == ["train", "validation"]
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,loss,macro_f1,lr"
    assert len(lines) == 5
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["best_epoch"] == report.best_epoch
    assert "history" not in saved
    _, header = load_checkpoint(tmp_path / "best.ckpt")
    assert header["epoch"] == report.best_epoch
    assert header["class_map"]["scheme_name"] == "tones"


def test_fit_is_deterministic(tmp_path, tone_corpus):
    _, manifest = tone_corpus
    policy = AugmentPolicy(noise_prob=0.0)
    cfg_u = UncertaintyConfig(method="patchdsu", k_h=2, k_w=3, p=0.5)
    for name in ("a", "b"):
        fit(manifest, tiny_model(), quick_cfg(), policy=policy, uncertainty=cfg_u, seed=3,
            run_dir=tmp_path / name)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()


def test_model_ends_with_best_validation_weights(tone_corpus):
    _, manifest = tone_corpus
    model = tiny_model(seed=1)
    report = fit(manifest, model, quick_cfg(epochs=3), seed=1)
    val_rows = [r for r in report.history if r.split == "validation"]
    assert report.best_val_macro_f1 == max(r.macro_f1 for r in val_rows)

    val = manifest.split(Split.VALIDATION)
    features = train._clean_features(val, DEFAULT_FRONTEND, 1, np.float32, None)
    predictions = predict_logits(model, features, batch_size=50).argmax(axis=1)
    counts = ConfusionCounts.from_predictions([e.label for e in val], predictions, 2)
    assert macro_f1(counts) == pytest.approx(report.best_val_macro_f1)


def test_zero_patience_stops_at_first_stale_epoch(tone_corpus):
    _, manifest = tone_corpus
    report = fit(manifest, tiny_model(seed=2), quick_cfg(epochs=4, early_stop_patience=0), seed=2)
    if report.stopped_early:
        assert report.epochs_run == report.best_epoch + 2
    else:
        assert report.epochs_run == 4
    assert report.best_epoch < report.epochs_run


def test_class_count_mismatch(tone_corpus):
    _, manifest = tone_corpus
    with pytest.raises(DataError):
        fit(manifest, tiny_model(n_classes=3), quick_cfg())


def test_missing_validation_split(tone_corpus):
    _, manifest = tone_corpus
    train_only = Manifest(examples=manifest.split(Split.TRAIN), class_map=manifest.class_map)
    with pytest.raises(DataError):
        fit(train_only, tiny_model(), quick_cfg())


def test_batch_of_one_warns(tone_corpus, caplog):
    _, manifest = tone_corpus
    small = Manifest(examples=manifest.split(Split.TRAIN)[:3] + manifest.split(Split.VALIDATION)[:3],
                     class_map=manifest.class_map)
    with caplog.at_level(logging.WARNING):
        fit(small, tiny_model(), quick_cfg(epochs=1, batch_size=1), uncertainty=UncertaintyConfig(method="dsu"))
    assert "batch statistic variance is zero" in caplog.text


def test_train_f1_helper(tone_corpus):
    _, manifest = tone_corpus
    report = fit(manifest, tiny_model(), quick_cfg(epochs=1))
    assert report.final_train_f1() == report.history[0].macro_f1
    assert math.isfinite(report.final_train_f1())


@pytest.mark.slow
@pytest.mark.parametrize("uncertainty", [
    None,
    UncertaintyConfig(method="dsu", p=0.5),
    UncertaintyConfig(method="patchdsu", k_h=6, k_w=10, p=0.4),
], ids=["baseline", "dsu", "patchdsu"])
def test_learns_the_tone_task(tone_corpus, uncertainty):
    _, manifest = tone_corpus
    model = tiny_model(spec=ModelSpec(n_layers=5, channels=8))
    cfg = TrainConfig(epochs=30, batch_size=20, early_stop_patience=10)
    report = fit(manifest, model, cfg, uncertainty=uncertainty, seed=0)
    assert report.best_val_macro_f1 > 95.0
