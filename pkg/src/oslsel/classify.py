"""Cost-sensitive classification from plug-in posteriors."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from oslsel.drm_core import BasisSpec, OslsDataset, Theta, ValidationError, posterior


@dataclass(frozen=True)
class CostMatrix:
    """Misclassification costs q[k, j] for predicting j when the truth is k.

    The diagonal is zero and every off-diagonal entry is strictly positive
    and finite.
    """

    q: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 2:
            raise ValidationError("cost matrix must be square with at least two classes")
        if not np.all(np.isfinite(q)):
            raise ValidationError("cost matrix entries must be finite")
        if np.any(np.diag(q) != 0.0):
            raise ValidationError("cost matrix diagonal must be zero")
        off = q[~np.eye(q.shape[0], dtype=bool)]
        if np.any(off <= 0.0):
            raise ValidationError("off-diagonal costs must be strictly positive")
        object.__setattr__(self, "q", q)

    @property
    def n_classes(self) -> int:
        return self.q.shape[0]

    @staticmethod
    def uniform(k_known: int) -> "CostMatrix":
        """Unit cost for every error; argmin matches argmax posterior."""
        size = k_known + 1
        return CostMatrix(np.ones((size, size)) - np.eye(size))


@dataclass(frozen=True)
class ClassificationReport:
    """Aggregate scores of a labeled evaluation pass."""

    confusion: np.ndarray
    class_counts: np.ndarray
    accuracy: float
    cost: float
    pi_weights: np.ndarray = field(repr=False, default=None)


def expected_costs(x: np.ndarray, theta: Theta, cost: CostMatrix, basis: BasisSpec) -> np.ndarray:
    """Posterior-expected cost of each assignment, one row per point."""
    if cost.n_classes != theta.k_known + 1:
        raise ValidationError(
            f"cost matrix is {cost.n_classes}x{cost.n_classes} but the model has "
            f"{theta.k_known + 1} classes"
        )
    w = posterior(np.atleast_2d(np.asarray(x, dtype=float)), theta, basis)
    return w @ cost.q


def optimal_assign(x: np.ndarray, theta: Theta, cost: CostMatrix, basis: BasisSpec) -> np.ndarray:
    """Assign each row the class with the lowest posterior-expected cost.

    Ties break toward the smallest class index.
    """
    # np.argmin already returns the first minimizer, which is the smallest index
    return np.argmin(expected_costs(x, theta, cost, basis), axis=1)


def classify_testset(
    solution,
    data,
    cost: CostMatrix | None = None,
) -> np.ndarray:
    """Label a feature matrix (or a dataset's test block) with the fitted model."""
    theta, basis = solution.theta, solution.basis
    x = data.test_x if isinstance(data, OslsDataset) else np.atleast_2d(np.asarray(data, dtype=float))
    if x.shape[1] != basis.input_dim():
        raise ValidationError(f"features have {x.shape[1]} columns, basis expects {basis.input_dim()}")
    if cost is None:
        cost = CostMatrix.uniform(theta.k_known)
    return optimal_assign(x, theta, cost, basis)


def empirical_cost(
    labels_pred: np.ndarray,
    labels_true: np.ndarray,
    cost: CostMatrix,
    pi_weights: np.ndarray | None = None,
) -> float:
    """Sample analogue of the expected misclassification cost.

    Sums q[k, j] * pi_k * (rate of predicting j on true-k rows). Class
    weights default to the empirical frequencies of ``labels_true``;
    supplying ``pi_weights`` scores against a different test-class mix.
    An absent true class contributes nothing and triggers a warning.
    """
    pred = np.asarray(labels_pred, dtype=int).ravel()
    true = np.asarray(labels_true, dtype=int).ravel()
    if pred.shape != true.shape:
        raise ValidationError("prediction and truth vectors differ in length")
    size = cost.n_classes
    if pred.size == 0:
        raise ValidationError("empty label vectors")
    if pred.min() < 0 or pred.max() >= size or true.min() < 0 or true.max() >= size:
        raise ValidationError("labels outside 0..K")
    counts = np.bincount(true, minlength=size).astype(float)
    if pi_weights is None:
        weights = counts / counts.sum()
    else:
        weights = np.asarray(pi_weights, dtype=float).ravel()
        if weights.shape != (size,):
            raise ValidationError("pi_weights must have one entry per class")
    total = 0.0
    for k in range(size):
        if counts[k] == 0:
            if weights[k] != 0.0:
                warnings.warn(f"true class {k} absent from evaluation set; term skipped")
            continue
        mask = true == k
        rates = np.bincount(pred[mask], minlength=size) / counts[k]
        total += weights[k] * float(cost.q[k] @ rates)
    return total


def confusion_matrix(labels_true: np.ndarray, labels_pred: np.ndarray, n_classes: int) -> np.ndarray:
    true = np.asarray(labels_true, dtype=int).ravel()
    pred = np.asarray(labels_pred, dtype=int).ravel()
    out = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(out, (true, pred), 1)
    return out


def report(
    labels_pred: np.ndarray,
    labels_true: np.ndarray,
    cost: CostMatrix,
    pi_weights: np.ndarray | None = None,
) -> ClassificationReport:
    """Confusion matrix, accuracy, and empirical cost in one bundle."""
    size = cost.n_classes
    conf = confusion_matrix(labels_true, labels_pred, size)
    counts = conf.sum(axis=1)
    acc = float(np.trace(conf)) / float(conf.sum())
    c = empirical_cost(labels_pred, labels_true, cost, pi_weights)
    used = (
        counts / counts.sum()
        if pi_weights is None
        else np.asarray(pi_weights, dtype=float)
    )
    return ClassificationReport(
        confusion=conf,
        class_counts=counts,
        accuracy=acc,
        cost=c,
        pi_weights=used,
    )


def accuracy_vs_theta_distance(
    theta_a: Theta,
    theta_b: Theta,
    eval_x: np.ndarray,
    eval_y: np.ndarray,
    basis: BasisSpec,
) -> tuple[float, tuple[float, float]]:
    """Sample posterior gap between two parameter values, plus both accuracies.

    The gap is the largest class-wise mean absolute posterior difference
    over the evaluation rows; accuracies use uniform costs.
    """
    x = np.atleast_2d(np.asarray(eval_x, dtype=float))
    y = np.asarray(eval_y, dtype=int).ravel()
    post_a = posterior(x, theta_a, basis)
    post_b = posterior(x, theta_b, basis)
    distance = float(np.max(np.mean(np.abs(post_a - post_b), axis=0)))
    cost = CostMatrix.uniform(theta_a.k_known)
    acc_a = float(np.mean(optimal_assign(x, theta_a, cost, basis) == y))
    acc_b = float(np.mean(optimal_assign(x, theta_b, cost, basis) == y))
    return distance, (acc_a, acc_b)
