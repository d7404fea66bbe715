import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import synthetic_digits
from vikanformer.data import pair
from vikanformer.entity import METRICS_COLUMNS, MetricsHistory, ModelConfig, TrainConfig
from vikanformer.errors import NonFiniteLossError, ShapeError
from vikanformer.model import ViKANformer, build_model, resolve_preset
from vikanformer.tensor import Tensor, parameter
from vikanformer.train import (
    Adam,
    AdamState,
    CsvMetricsSink,
    adam_step,
    cross_entropy,
    evaluate,
    train,
)


def _digits(n: int, seed: int = 0, split: str = "train"):
    labels = np.arange(n) % 10
    return pair(Tensor(synthetic_digits(labels, seed) / 255.0), labels, split)


# *** cross-entropy ***
def test_uniform_logits_give_ln10():
    loss = cross_entropy(Tensor(np.zeros((4, 10))), [0, 3, 5, 9])
    assert abs(loss.item() - math.log(10)) < 1e-12


def test_confident_correct_logit():
    logits = np.zeros((1, 10))
    logits[0, 3] = 30.0
    assert cross_entropy(Tensor(logits), [3]).item() < 1e-9


def test_matches_naive_log_softmax(rng):
    logits = rng.normal(scale=3.0, size=(6, 10))
    labels = rng.integers(0, 10, size=6)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = -np.mean(np.log(probs[np.arange(6), labels]))
    assert abs(cross_entropy(Tensor(logits), labels).item() - expected) < 1e-12


def test_large_logits_stay_finite():
    logits = np.array([[1000.0, 0.0, -1000.0]])
    assert math.isfinite(cross_entropy(Tensor(logits), [1]).item())


def test_cross_entropy_gradient(rng):
    logits = parameter(rng.normal(size=(5, 4)))
    labels = np.array([0, 1, 3, 3, 2])
    cross_entropy(logits, labels).backward()
    probs = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    assert_allclose(logits.grad, (probs - np.eye(4)[labels]) / 5, atol=1e-14)


def test_cross_entropy_shapes():
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.zeros((3, 10))), [0, 1])


# *** Adam ***
def test_zero_gradient_leaves_params():
    p = parameter([1.0, -2.0])
    adam_step({"p": p}, {"p": np.zeros(2)}, AdamState(), 1, TrainConfig(epochs=10))
    assert p.data.tolist() == [1.0, -2.0]


def test_first_step_moves_by_lr_against_gradient():
    cfg = TrainConfig(lr=0.003, epochs=10)
    p = parameter([0.5, 0.5, 0.5])
    adam_step({"p": p}, {"p": np.array([2.0, -0.3, 1e-2])}, AdamState(), 1, cfg)
    assert_allclose(p.data, [0.5 - 0.003, 0.5 + 0.003, 0.5 - 0.003], rtol=1e-5)


def test_moments_decay_without_gradient():
    cfg = TrainConfig(epochs=10)
    state = AdamState()
    p = parameter([0.0])
    adam_step({"p": p}, {"p": np.array([1.0])}, state, 1, cfg)
    adam_step({"p": p}, {"p": None}, state, 2, cfg)
    assert_allclose(state.m["p"], [0.9 * 0.1])
    assert_allclose(state.v["p"], [0.999 * 0.001])


def test_matches_scalar_reference_over_twenty_steps():
    cfg = TrainConfig(lr=0.003, epochs=10)
    rng = np.random.default_rng(4)
    grads = rng.normal(size=20)

    theta, m, v = 0.7, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.003 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)

    p = parameter([0.7])
    state = AdamState()
    for t, g in enumerate(grads, start=1):
        adam_step({"p": p}, {"p": np.array([g])}, state, t, cfg)
    assert abs(p.data[0] - theta) < 1e-12


def test_step_index_starts_at_one():
    with pytest.raises(ValueError):
        adam_step({}, {}, AdamState(), 0, TrainConfig(epochs=10))


def test_adam_class_uses_accumulated_grads():
    cfg = TrainConfig(epochs=10)
    p = parameter([1.0, 2.0])
    opt = Adam({"p": p}, cfg)
    (p * p).sum().backward()
    opt.step()
    assert opt.state.t == 1
    assert_allclose(p.data, [1.0 - cfg.lr, 2.0 - cfg.lr], rtol=1e-6)
    opt.zero_grad()
    assert p.grad is None


# *** evaluate / train ***
def test_evaluate_untrained_model():
    model = ViKANformer.create(resolve_preset("sinekan"), seed=0)
    result = evaluate(model, _digits(20, seed=1, split="test"), batch_size=8)
    assert abs(result.loss - math.log(10)) < 1e-12
    assert result.roc_auc_ovr == 0.5
    assert result.acc == pytest.approx(0.1)
    assert result.n == 20


def test_evaluate_single_class_records_nan():
    ds = pair(Tensor(np.zeros((3, 28, 28))), np.array([2, 2, 2]), "test")
    result = evaluate(ViKANformer.create(resolve_preset("sinekan"), seed=0), ds)
    assert math.isnan(result.roc_auc_ovr)


def _small_run(variant: str = "sinekan", epochs: int = 4, seed: int = 7, sink=None):
    model = build_model("mlp-baseline" if variant == "mlp-baseline" else "vit", resolve_preset(
        "sinekan" if variant == "mlp-baseline" else variant), seed=seed, hidden=16)
    cfg = TrainConfig(lr=0.005, epochs=epochs, batch=8, seed=seed, eval_batch=10)
    return train(model, _digits(32), _digits(20, seed=1, split="test"), cfg, sink)


@pytest.mark.parametrize("variant", ["sinekan", "fastkan", "mlp-baseline"])
def test_training_reduces_loss(variant):
    history = _small_run(variant).history
    assert [r.epoch for r in history.records] == [1, 2, 3, 4]
    assert history.records[-1].train_loss < history.records[0].train_loss


def test_training_is_deterministic():
    first = _small_run(epochs=2).history.to_frame().drop(columns="seconds")
    second = _small_run(epochs=2).history.to_frame().drop(columns="seconds")
    assert first.equals(second)


def test_non_finite_loss_aborts():
    model = ViKANformer.create(resolve_preset("fourierkan"), seed=0)
    model.params.head.bias.data[0] = np.nan
    cfg = TrainConfig(epochs=10, batch=8)
    with pytest.raises(NonFiniteLossError) as excinfo:
        train(model, _digits(16), _digits(10, split="test"), cfg)
    assert (excinfo.value.epoch, excinfo.value.batch, excinfo.value.variant) == (1, 1, "fourierkan")


def test_csv_sink_writes_every_epoch(tmp_path):
    path = tmp_path / "run" / "metrics.csv"
    _small_run(epochs=2, sink=CsvMetricsSink(path))
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(METRICS_COLUMNS)
    assert lines[0] == "epoch,train_loss,train_acc,test_acc,macro_f1,roc_auc_ovr,seconds"
    assert len(lines) == 3


def test_train_config_roundtrip():
    cfg = TrainConfig(lr=0.002, epochs=20, variant=ModelConfig().ffn)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_metrics_csv_reads_back(tmp_path):
    path = tmp_path / "metrics.csv"
    written = _small_run(epochs=2, sink=CsvMetricsSink(path)).history
    restored = MetricsHistory.read_csv(path)
    assert [r.epoch for r in restored.records] == [1, 2]
    for a, b in zip(written.records, restored.records):
        assert a.train_loss == pytest.approx(b.train_loss, rel=1e-12)
        assert a.test_acc == pytest.approx(b.test_acc, rel=1e-12)
        assert a.macro_f1 == pytest.approx(b.macro_f1, rel=1e-12)


def test_reference_settings_check():
    assert TrainConfig(lr=0.003, epochs=10).check_reference()
    assert TrainConfig(lr=0.001, epochs=20).check_reference()
    assert not TrainConfig(lr=0.01, epochs=10).check_reference()
    assert not TrainConfig(lr=0.003, epochs=4).check_reference()
