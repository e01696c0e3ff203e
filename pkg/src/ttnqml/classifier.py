"""Linear decision layer on top-scale TTN features and F1 scoring."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import DEFAULT_RCOND, ContractError, pinv_solve
from .ttn import TTNModel, WeightMatrix, coarse_grain, coarse_grain_batch

__all__ = [
    "WeightMatrix",
    "LabeledFeatures",
    "ConfusionMatrix",
    "F1Report",
    "MissingWeightsError",
    "one_hot",
    "cost",
    "cost_gradient",
    "solve_weights_pinv",
    "decision_values",
    "classify",
    "predict",
    "predict_batch",
    "confusion_matrix",
    "f1_scores",
    "evaluate",
    "write_report_csv",
]


class MissingWeightsError(ContractError):
    """The model has no decision weights."""


@dataclass
class LabeledFeatures:
    """Top-scale feature rows with integer class labels."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ContractError("features must be (M, chi)")
        if self.labels.shape != (self.features.shape[0],):
            raise ContractError("one label per feature row required")
        if self.n_classes < 1:
            raise ContractError("need at least one class")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContractError(f"labels must lie in 0..{self.n_classes - 1}")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    def targets(self) -> np.ndarray:
        return one_hot(self.labels, self.n_classes)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _weights_array(lf: LabeledFeatures, w) -> np.ndarray:
    mat = w.matrix if isinstance(w, WeightMatrix) else np.asarray(w, dtype=np.float64)
    if mat.shape != (lf.features.shape[1], lf.n_classes):
        raise ContractError(
            f"weights {mat.shape} incompatible with features {lf.features.shape} "
            f"and {lf.n_classes} classes"
        )
    return mat


def cost(lf: LabeledFeatures, w) -> float:
    """Quadratic cost ``(1/2M) sum_m sum_l (<W_l|Phi_m> - delta)^2``."""
    mat = _weights_array(lf, w)
    r = lf.features @ mat - lf.targets()
    return float(0.5 * np.einsum("ml,ml->", r, r) / lf.n_samples)


def cost_gradient(lf: LabeledFeatures, w) -> np.ndarray:
    """Gradient of :func:`cost` with respect to the weight matrix."""
    mat = _weights_array(lf, w)
    r = lf.features @ mat - lf.targets()
    return lf.features.T @ r / lf.n_samples


def solve_weights_pinv(lf: LabeledFeatures, rcond: float = DEFAULT_RCOND) -> WeightMatrix:
    """Least-squares optimal weights via the pseudoinverse of the feature matrix."""
    if lf.n_samples < 1:
        raise ContractError("need at least one sample")
    return WeightMatrix(pinv_solve(lf.features, lf.targets(), rcond), is_isometric=False)


def decision_values(features, w) -> np.ndarray:
    """Raw ``f_l = <W_l|Phi>`` for one feature vector or a batch of rows."""
    mat = w.matrix if isinstance(w, WeightMatrix) else np.asarray(w, dtype=np.float64)
    return np.asarray(features, dtype=np.float64) @ mat


def classify(values) -> np.ndarray:
    """Argmax of the squared decision values; ties go to the lowest class."""
    values = np.asarray(values, dtype=np.float64)
    return np.argmax(values * values, axis=-1)


def _require_weights(model: TTNModel) -> WeightMatrix:
    if model.weights is None:
        raise MissingWeightsError("model has no decision weights; train or solve them first")
    return model.weights


def predict(model: TTNModel, x) -> tuple[int, np.ndarray]:
    """Class index and raw decision values for one raw data vector."""
    w = _require_weights(model)
    vals = decision_values(coarse_grain(model, x), w)
    return int(classify(vals)), vals


def predict_batch(model: TTNModel, X) -> tuple[np.ndarray, np.ndarray]:
    w = _require_weights(model)
    vals = decision_values(coarse_grain_batch(model, X), w)
    return classify(vals), vals


@dataclass
class ConfusionMatrix:
    """Counts with rows indexed by truth and columns by prediction."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ContractError("confusion matrix must be square")
        if np.any(self.counts < 0):
            raise ContractError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(truth, predicted, n_classes: int) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if truth.shape != predicted.shape:
        raise ContractError("truth and prediction lengths differ")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truth, predicted), 1)
    return ConfusionMatrix(counts)


@dataclass
class F1Report:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float


def _safe_ratio(num, den) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return out


def f1_scores(cm: ConfusionMatrix) -> F1Report:
    """Per-class precision, recall and F1 with their unweighted mean.

    A class whose denominator vanishes gets 0 for that quantity.
    """
    c = cm.counts.astype(np.float64)
    diag = np.diag(c)
    p = _safe_ratio(diag, c.sum(axis=0))
    r = _safe_ratio(diag, c.sum(axis=1))
    f1 = _safe_ratio(2 * p * r, p + r)
    return F1Report(p, r, f1, float(f1.mean()) if f1.size else 0.0)


def evaluate(features, labels, w, n_classes: int) -> tuple[ConfusionMatrix, F1Report]:
    pred = classify(decision_values(features, w))
    cm = confusion_matrix(labels, pred, n_classes)
    return cm, f1_scores(cm)


def write_report_csv(path, cm: ConfusionMatrix, report: F1Report) -> None:
    """Per-class p/r/F1 rows, the confusion matrix, then the macro F1."""
    n = cm.counts.shape[0]
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["class", "precision", "recall", "f1"])
        for i in range(n):
            out.writerow([i, f"{report.precision[i]:.6f}", f"{report.recall[i]:.6f}", f"{report.f1[i]:.6f}"])
        out.writerow([])
        out.writerow(["truth\\pred"] + list(range(n)))
        for i in range(n):
            out.writerow([i] + cm.counts[i].tolist())
        out.writerow([])
        out.writerow(["macro_f1", f"{report.macro_f1:.6f}"])
