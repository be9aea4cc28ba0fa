import numpy as np
import pytest

from engine.optim import SGD, SGDConfig, cosine_lr, param_groups, warmup_ramp
from models.config import ModelConfig
from models.detector import build_model
from models.trainer import cluster_config_anchors, evaluate_samples, load_samples, train
from utils.toy_dataset import make_toy_dataset
from utils.weights_io import dump_weights


def small_config(**train):
    return ModelConfig(width_multiplier=0.25, input_size=64).with_overrides(
        **{f"train_{k}": v for k, v in train.items()}
    )


def test_lr_schedule():
    assert cosine_lr(0, 10, 0.01) == pytest.approx(0.01)
    assert cosine_lr(10, 10, 0.01, lrf=0.1) == pytest.approx(0.001)
    assert warmup_ramp(0, 4, 0.01) == pytest.approx(0.0025)
    assert warmup_ramp(4, 4, 0.01) == 0.01
    assert warmup_ramp(0, 0, 0.01) == 0.01
    # 偏置学习率与动量从起点线性过渡
    assert warmup_ramp(0, 4, 0.01, start=0.1) == pytest.approx(0.1 + (0.01 - 0.1) / 4)
    assert warmup_ramp(3, 4, 0.937, start=0.8) == 0.937


def test_param_groups():
    model = build_model(small_config())
    weight, norm, bias = param_groups(model, 5e-4)
    assert (weight.name, norm.name, bias.name) == ("weight", "norm", "bias")
    assert weight.weight_decay == 5e-4 and norm.weight_decay == bias.weight_decay == 0.0
    names = {id(p): name for name, p in model.named_parameters()}
    assert all(p.ndim == 4 or names[id(p)].startswith("backbone") for p in weight.params)
    assert all(names[id(p)].endswith("gamma") for p in norm.params)
    assert all(names[id(p)].endswith(("beta", "bias")) for p in bias.params)
    # 检测头的卷积偏置在 bias 组
    assert len(norm.params) < len(bias.params)
    assert len(weight.params) + len(norm.params) + len(bias.params) == len(model.parameters())


def test_sgd_bias_lr_only_touches_bias_group():
    model = build_model(small_config())
    optimizer = SGD(param_groups(model), SGDConfig(lr=0.01))
    optimizer.set_lr(0.002, bias_lr=0.05)
    assert [g.lr for g in optimizer.groups] == [0.002, 0.002, 0.05]
    assert optimizer.lr == 0.002
    optimizer.set_lr(0.01)
    assert [g.lr for g in optimizer.groups] == [0.01] * 3


def test_samples_are_in_model_pixels(tmp_path):
    csv_path, records = make_toy_dataset(tmp_path / "toy", count=3, image_size=64, seed=2)
    samples = load_samples(csv_path, 128)
    assert [s.image.shape for s in samples] == [(3, 128, 128)] * 3
    boxes = np.concatenate([s.boxes for s in samples])
    expected = np.array([r.box for r in records]) * 128
    np.testing.assert_allclose(boxes[:, 1:], expected, atol=1e-9)


def test_anchor_clustering_replaces_config(tmp_path):
    csv_path, _ = make_toy_dataset(tmp_path / "toy", count=16, image_size=64, seed=0)
    samples = load_samples(csv_path, 64)
    config = small_config()
    clustered = cluster_config_anchors(config, samples, seed=0)
    assert clustered.anchors != config.anchors
    flat = [pair for group in clustered.anchors for pair in group]
    areas = [w * h for w, h in flat]
    assert len(flat) == 12 and areas == sorted(areas)
    # 框太少时沿用原 anchor
    assert cluster_config_anchors(config, samples[:2], seed=0).anchors == config.anchors


def test_training_is_deterministic(tmp_path):
    csv_path, _ = make_toy_dataset(tmp_path / "toy", count=4, image_size=64, seed=0)
    samples = load_samples(csv_path, 64)
    config = small_config(epochs=2, warmup_epochs=1)
    first = train(config, samples, log_path=tmp_path / "a.csv")
    second = train(config, samples, log_path=tmp_path / "b.csv")
    assert dump_weights(first.model) == dump_weights(second.model)
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    assert len(first.history) == 2
    assert all(np.isfinite(log.total) for log in first.history)
    assert not first.model.training


def test_warmup_spans_minimum_iterations(tmp_path):
    csv_path, _ = make_toy_dataset(tmp_path / "toy", count=4, image_size=64, seed=0)
    samples = load_samples(csv_path, 64)
    config = small_config(epochs=1, batch_size=2, warmup_min_iters=3)
    result = train(config, samples)
    assert (result.warmup_iters, result.batches_per_epoch, result.warmup_epochs) == (6, 2, 3)
    # warmup 尚未结束，记录的是线性过渡中的学习率
    assert result.history[0].lr == pytest.approx(0.01 * 2 / 6)


@pytest.mark.slow
def test_toy_overfit(tmp_path):
    csv_path, _ = make_toy_dataset(tmp_path / "toy", count=16, image_size=160, seed=0)
    samples = load_samples(csv_path, 160)
    config = ModelConfig(width_multiplier=0.25, input_size=160)
    result = train(config, samples)
    losses = np.array([log.total for log in result.history[result.warmup_epochs :]])
    assert len(losses) >= 50
    # 逐 epoch 单调下降，允许 batch 组合不同带来的 2% 抖动；按 5 轮分段的均值严格下降
    assert np.all(losses[1:] <= losses[:-1] * 1.02), np.round(losses, 4).tolist()
    blocks = losses[: len(losses) // 5 * 5].reshape(-1, 5).mean(axis=1)
    assert np.all(np.diff(blocks) < 0), np.round(blocks, 4).tolist()
    assert losses[-1] < 0.5 * losses[0]
    report, _ = evaluate_samples(result.model, samples, conf_threshold=0.25)
    assert report.recall >= 0.95
    assert report.map >= 0.90
