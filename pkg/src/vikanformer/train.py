"""
Training loop: per epoch shuffle, per batch forward -> cross-entropy ->
zero grads -> backward -> Adam, then a full pass over the test split.
"""
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from loguru import logger

from vikanformer.data import Dataset, batch_iter
from vikanformer.entity import EpochMetrics, MetricsHistory, TrainConfig
from vikanformer.errors import NonFiniteLossError, ShapeError
from vikanformer.metrics import accuracy, macro_f1, roc_auc_ovr
from vikanformer.model import Classifier
from vikanformer.nn import softmax
from vikanformer.tensor import Tensor, no_grad, zero_grads


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits [B, C] and labels [B], got {logits.shape} and {labels.shape}")
    b, c = logits.shape
    shifted = logits - np.max(logits.data, axis=1, keepdims=True)
    log_z = shifted.exp().sum(axis=1, keepdims=True).log()
    one_hot = np.zeros((b, c), dtype=logits.dtype)
    one_hot[np.arange(b), labels] = 1.0
    return -((shifted - log_z) * one_hot).sum() / b


# *** Adam ***
@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState, t: int,
              cfg: TrainConfig):
    """One bias-corrected Adam update, in place on params and moments."""
    if t < 1:
        raise ValueError(f"Adam step index starts at 1, got {t}")
    beta1, beta2 = cfg.betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)


class Adam:
    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = AdamState()

    def zero_grad(self):
        zero_grads(self.params.values())

    def step(self):
        self.state.t += 1
        grads = {name: p.grad for name, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.state.t, self.cfg)


# *** evaluation ***
@dataclass
class EvalResult:
    loss: float
    acc: float
    macro_f1: float
    roc_auc_ovr: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def model_dtype(model: Classifier) -> np.dtype:
    return next(iter(model.parameters().values())).dtype


def predict_logits(model: Classifier, ds: Dataset, batch_size: int = 1000) -> np.ndarray:
    dtype = model_dtype(model)
    chunks = []
    with no_grad():
        for batch in batch_iter(ds, batch_size, seed=0, shuffle=False):
            chunks.append(model(Tensor(batch.images.data, dtype=dtype)).data)
    return np.concatenate(chunks, axis=0)


def evaluate(model: Classifier, ds: Dataset, batch_size: int = 1000) -> EvalResult:
    logits = Tensor(predict_logits(model, ds, batch_size), dtype=model_dtype(model))
    with no_grad():
        loss = cross_entropy(logits, ds.labels).item()
        probs = softmax(logits, axis=-1).data
    preds = probs.argmax(axis=1)
    try:
        auc = roc_auc_ovr(probs, ds.labels)
    except ValueError as e:
        logger.warning(f"ROC AUC skipped on {len(ds)} samples: {e}")
        auc = float("nan")
    return EvalResult(
        loss=loss,
        acc=accuracy(preds, ds.labels),
        macro_f1=macro_f1(preds, ds.labels, model.config.n_classes),
        roc_auc_ovr=auc,
        n=len(ds),
    )


# *** metric sinks ***
class MetricsSink(Protocol):
    def write(self, record: EpochMetrics) -> None: ...


class MemorySink:
    def __init__(self):
        self.history = MetricsHistory()

    def write(self, record: EpochMetrics):
        self.history.append(record)


class CsvMetricsSink:
    """Rewrites the whole CSV after every epoch so a killed run keeps its finished rows."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.history = MetricsHistory()

    def write(self, record: EpochMetrics):
        self.history.append(record)
        self.history.to_csv(self.path)


# *** training ***
@dataclass
class TrainResult:
    model: Classifier
    history: MetricsHistory


def train(model: Classifier, ds_train: Dataset, ds_test: Dataset, cfg: TrainConfig,
          sink: MetricsSink | None = None) -> TrainResult:
    sink = sink or MemorySink()
    params = model.parameters()
    optimizer = Adam(params, cfg)
    dtype = model_dtype(model)
    history = MetricsHistory()
    label = model.label
    logger.info(f"Start training {label}: {len(ds_train)=}, {len(ds_test)=}, {cfg.epochs=}, {cfg.batch=}, {cfg.lr=}")
    cfg.check_reference()

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        loss_sum, correct, seen = 0.0, 0, 0
        for step, batch in enumerate(batch_iter(ds_train, cfg.batch, cfg.seed, epoch), start=1):
            logits = model(Tensor(batch.images.data, dtype=dtype))
            loss = cross_entropy(logits, batch.labels)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(epoch, step, label, value)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            loss_sum += value * len(batch)
            correct += int(np.sum(logits.data.argmax(axis=1) == batch.labels))
            seen += len(batch)
            if step % cfg.log_every == 0:
                logger.debug(f"{label} {epoch=} {step=} loss={value:.4f}")

        result = evaluate(model, ds_test, cfg.eval_batch)
        record = EpochMetrics(
            epoch=epoch,
            train_loss=loss_sum / seen,
            train_acc=correct / seen,
            test_acc=result.acc,
            macro_f1=result.macro_f1,
            roc_auc_ovr=result.roc_auc_ovr,
            seconds=time.perf_counter() - start,
        )
        history.append(record)
        sink.write(record)
        logger.info(
            f"{label} epoch {epoch}/{cfg.epochs}: train_loss={record.train_loss:.4f} train_acc={record.train_acc:.4f} "
            f"test_acc={record.test_acc:.4f} macro_f1={record.macro_f1:.4f} auc={record.roc_auc_ovr:.4f} "
            f"({record.seconds:.1f}s)"
        )
    return TrainResult(model, history)
