"""The five downstream tasks: kinds, losses, metrics and label access.

rr and age are regressions scored by MAE; sex and potassium are binary
classifications scored by positive-class F1 (threshold 0.5 on the sigmoid);
arrhythmia is a 15-way classification scored by top-1 accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import UsageError
from .signal import LabelSet


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str          # regression | binary | multiclass
    output_dim: int
    loss: str          # mse | weighted_bce | cross_entropy
    metric: str        # mae | f1 | accuracy

    @property
    def higher_is_better(self) -> bool:
        return self.kind != "regression"


TASKS: dict[str, TaskSpec] = {
    "rr": TaskSpec("rr", "regression", 1, "mse", "mae"),
    "age": TaskSpec("age", "regression", 1, "mse", "mae"),
    "sex": TaskSpec("sex", "binary", 1, "weighted_bce", "f1"),
    "potassium": TaskSpec("potassium", "binary", 1, "weighted_bce", "f1"),
    "arrhythmia": TaskSpec("arrhythmia", "multiclass", 15, "cross_entropy", "accuracy"),
}


def task_by_name(name: str) -> TaskSpec:
    if name not in TASKS:
        raise UsageError(f"unknown task {name!r}; expected one of {sorted(TASKS)}")
    return TASKS[name]


def label_value(task: TaskSpec, labels: LabelSet) -> float:
    return {
        "rr": labels.rr_ms,
        "age": labels.age_years,
        "sex": float(labels.sex),
        "potassium": float(labels.potassium_abnormal),
        "arrhythmia": float(labels.arrhythmia_class),
    }[task.name]


def label_vector(task: TaskSpec, labels: list[LabelSet]) -> np.ndarray:
    return np.array([label_value(task, l) for l in labels])


def class_weights(y: np.ndarray) -> tuple[float, float]:
    """Balanced binary weights proportional to inverse prevalence."""
    n = y.size
    n_pos = float(y.sum())
    n_neg = n - n_pos
    w_pos = n / (2.0 * n_pos) if n_pos > 0 else 1.0
    w_neg = n / (2.0 * n_neg) if n_neg > 0 else 1.0
    return w_pos, w_neg


def task_loss(task: TaskSpec, logits: Tensor, targets: np.ndarray,
              pos_weight: float = 1.0, neg_weight: float = 1.0) -> Tensor:
    """Mean loss of a (B, L) logits batch against raw target values.

    Regression targets are whatever scale the caller trains in (the pipeline
    standardizes them); binary/multiclass targets are class indices.
    """
    n = logits.shape[0]
    if task.kind == "regression":
        diff = ad.sub(ad.reshape(logits, (n,)), Tensor(targets))
        return ad.reduce_mean(ad.mul(diff, diff))
    if task.kind == "binary":
        z = ad.reshape(logits, (n,))
        y = targets.astype(np.float64)
        w = np.where(y > 0.5, pos_weight, neg_weight)
        pos_term = ad.mul(Tensor(y), ad.softplus(ad.neg(z)))
        neg_term = ad.mul(Tensor(1.0 - y), ad.softplus(z))
        return ad.reduce_mean(ad.mul(Tensor(w), ad.add(pos_term, neg_term)))
    onehot = np.zeros((n, task.output_dim))
    onehot[np.arange(n), targets.astype(int)] = 1.0
    picked = ad.reduce_sum(ad.mul(ad.log_softmax(logits, axis=1), Tensor(onehot)))
    return ad.mul(picked, -1.0 / n)


def predictions(task: TaskSpec, logits: np.ndarray) -> np.ndarray:
    """Point predictions from raw logits (regression values still in the
    training scale; the caller un-standardizes)."""
    if task.kind == "regression":
        return logits[:, 0]
    if task.kind == "binary":
        return (logits[:, 0] >= 0.0).astype(np.float64)  # sigmoid >= 0.5
    return logits.argmax(axis=1).astype(np.float64)


def mae(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.abs(pred - y)))


def f1_score(pred: np.ndarray, y: np.ndarray) -> float:
    tp = float(np.sum((pred > 0.5) & (y > 0.5)))
    fp = float(np.sum((pred > 0.5) & (y <= 0.5)))
    fn = float(np.sum((pred <= 0.5) & (y > 0.5)))
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(pred.astype(int) == y.astype(int)))


def task_metric(task: TaskSpec, pred: np.ndarray, y: np.ndarray) -> float:
    if task.metric == "mae":
        return mae(pred, y)
    if task.metric == "f1":
        return f1_score(pred, y)
    return accuracy(pred, y)


def metric_from_logits(task: TaskSpec, logits: np.ndarray, y: np.ndarray) -> float:
    return task_metric(task, predictions(task, logits), y)
