"""
Classification metrics over integer predictions / class-probability scores.
"""
import numpy as np

from vikanformer.errors import ShapeError
from vikanformer.tensor import Tensor


def _as_labels(preds, truth) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise ShapeError(f"predictions {preds.shape} and truth {truth.shape} differ in length")
    return preds, truth


def accuracy(preds, truth) -> float:
    preds, truth = _as_labels(preds, truth)
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return float(np.mean(preds == truth))


def confusion_matrix(preds, truth, n_classes: int = 10) -> np.ndarray:
    """rows: true class, columns: predicted class"""
    preds, truth = _as_labels(preds, truth)
    return np.bincount(truth * n_classes + preds, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def macro_f1(preds, truth, n_classes: int = 10) -> float:
    """
    Unweighted mean of per-class F1 = 2TP / (2TP + FP + FN). Classes that
    appear neither in truth nor in predictions are left out of the mean.
    """
    cm = confusion_matrix(preds, truth, n_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    present = (tp + fp + fn) > 0
    if not present.any():
        return 0.0
    f1 = 2.0 * tp[present] / (2.0 * tp[present] + fp[present] + fn[present])
    return float(np.mean(f1))


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks, tied values share the mean of their positions."""
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts).astype(np.float64)
    mean_rank = ends - (counts - 1) / 2.0
    return mean_rank[inverse.reshape(-1)]


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann–Whitney U / (n_pos * n_neg); ties count one half."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = average_ranks(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc_ovr(scores, truth) -> float:
    """Macro one-vs-rest ROC AUC over every class having both positives and negatives."""
    scores = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    truth = np.asarray(truth, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != truth.shape[0]:
        raise ShapeError(f"scores must be [N, C] matching {truth.shape[0]} labels, got {scores.shape}")
    aucs = []
    for c in range(scores.shape[1]):
        positive = truth == c
        if positive.all() or not positive.any():
            continue
        aucs.append(binary_auc(scores[:, c].astype(np.float64), positive))
    if not aucs:
        raise ValueError("no class has both positive and negative samples; ROC AUC is undefined")
    return float(np.mean(aucs))
