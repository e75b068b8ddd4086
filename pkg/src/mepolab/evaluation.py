"""Streaming metrics and the sequential-vs-joint update gap probe.

Metrics: mean anytime accuracy over the evaluation points (trapezoidal when
the points are unevenly spaced), final all-class accuracy, and forgetting as
the mean per-task drop from peak to final accuracy.

The gap probe compares two sequential gradient steps (task A then task B)
against one joint step on the summed gradients. For a quadratic second loss
the deviation equals ``eta^2 * ||H_B @ grad_A||`` exactly; for smooth losses
it scales as ``eta^2``, which the log-log slope fit checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateGapError,
    EmptyLogError,
    EmptyTestSetError,
    MissingRecordsError,
)
from .net import (
    MlpModel,
    backward,
    flatten_backbone,
    flatten_backbone_grads,
    forward,
    masked_ce_batch,
    unflatten_backbone,
)


@dataclass(frozen=True)
class EvalRecord:
    samples_seen: int
    seen_class_count: int
    accuracy: float


@dataclass
class EvalLog:
    records: list[EvalRecord] = field(default_factory=list)
    task_accuracies: dict[int, list[float]] = field(default_factory=dict)
    align_fallbacks: int = 0

    def to_csv(self) -> str:
        lines = ["samples_seen,seen_class_count,anytime_accuracy"]
        for r in self.records:
            lines.append(f"{r.samples_seen},{r.seen_class_count},{r.accuracy!r}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_csv(text: str) -> "EvalLog":
        lines = [ln for ln in text.splitlines() if ln]
        records = []
        for ln in lines[1:]:
            s, c, a = ln.split(",")
            records.append(EvalRecord(int(s), int(c), float(a)))
        return EvalLog(records=records)


def masked_accuracy(model: MlpModel, xs, ys, classes) -> float:
    """Accuracy with the prediction restricted to the given class ids."""
    ys = np.asarray(ys, dtype=np.int64)
    if len(ys) == 0:
        return 0.0
    classes = np.asarray(sorted(int(c) for c in np.asarray(classes).ravel()))
    _, logits, _ = forward(model, xs, use_adapter=model.adapter is not None)
    logits = np.atleast_2d(logits)
    pred = classes[np.argmax(logits[:, classes], axis=1)]
    return float(np.mean(pred == ys))


def compute_auc(log: EvalLog) -> float:
    """Mean anytime accuracy over the evaluation points.

    Equally spaced points give the arithmetic mean; unevenly spaced points
    give the trapezoidal integral divided by the span.
    """
    if not log.records:
        raise EmptyLogError("no evaluation records")
    acc = np.array([r.accuracy for r in log.records], dtype=np.float64)
    pos = np.array([r.samples_seen for r in log.records], dtype=np.float64)
    if np.any(np.diff(pos) <= 0):
        raise ValueError("samples_seen must be strictly increasing")
    if acc.min() == acc.max():
        return float(acc[0])
    if len(acc) == 1:
        return float(acc[0])
    gaps = np.diff(pos)
    if np.all(gaps == gaps[0]):
        return float(acc.mean())
    integral = float(((acc[1:] + acc[:-1]) / 2.0 * gaps).sum())
    return integral / float(pos[-1] - pos[0])


def compute_last(model: MlpModel, test_xs, test_ys) -> float:
    """Final accuracy over the full label set of the head."""
    test_ys = np.asarray(test_ys, dtype=np.int64)
    if len(test_ys) == 0:
        raise EmptyTestSetError("empty test set")
    return masked_accuracy(model, test_xs, test_ys, np.arange(model.class_count))


def compute_forgetting(table: dict[int, list[float]] | EvalLog) -> float:
    """Mean over tasks of (peak historical accuracy - final accuracy), >= 0."""
    if isinstance(table, EvalLog):
        table = table.task_accuracies
    if not table:
        raise MissingRecordsError("empty per-task accuracy table")
    drops = []
    for task_id, accs in table.items():
        if not accs:
            raise MissingRecordsError(f"task {task_id} has no accuracy records")
        drops.append(max(0.0, max(accs) - accs[-1]))
    return float(np.mean(drops))


@dataclass
class QuadraticLoss:
    """L(theta) = 0.5 * (theta - target)^T hess (theta - target)."""

    target: np.ndarray
    hess: np.ndarray

    def value(self, theta: np.ndarray) -> float:
        d = theta - self.target
        return 0.5 * float(d @ self.hess @ d)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.hess @ (theta - self.target)


@dataclass
class LinearLoss:
    """L(theta) = slope . theta (constant gradient, zero Hessian)."""

    slope: np.ndarray

    def value(self, theta: np.ndarray) -> float:
        return float(self.slope @ theta)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.slope.copy()


@dataclass
class MlpBatchLoss:
    """Masked cross-entropy on a fixed batch, as a function of the flat
    backbone parameters (the head stays fixed)."""

    model: MlpModel
    xs: np.ndarray
    ys: np.ndarray
    mask: np.ndarray

    def _rebuild(self, theta: np.ndarray) -> MlpModel:
        return unflatten_backbone(self.model, theta)

    def value(self, theta: np.ndarray) -> float:
        m = self._rebuild(theta)
        _, logits, _ = forward(m, self.xs)
        loss, _ = masked_ce_batch(logits, self.ys, self.mask)
        return loss

    def grad(self, theta: np.ndarray) -> np.ndarray:
        m = self._rebuild(theta)
        _, logits, cache = forward(m, self.xs)
        _, grad_logits = masked_ce_batch(logits, self.ys, self.mask)
        grads = backward(m, cache, grad_logits)
        return flatten_backbone_grads(grads.backbone)


@dataclass
class GapExperiment:
    theta0: np.ndarray
    loss_a: object  # anything with .grad(theta)
    loss_b: object
    etas: list[float]

    def __post_init__(self) -> None:
        etas = list(self.etas)
        if any(e <= 0 for e in etas):
            raise ValueError("etas must be strictly positive")
        if len(set(etas)) != len(etas):
            raise ValueError("etas must be distinct")


def measure_gaps(exp: GapExperiment) -> np.ndarray:
    """``||theta_seq - theta_joint||`` for every step size."""
    theta0 = np.asarray(exp.theta0, dtype=np.float64)
    gaps = []
    for eta in exp.etas:
        g_a = exp.loss_a.grad(theta0)
        theta1 = theta0 - eta * g_a
        theta_seq = theta1 - eta * exp.loss_b.grad(theta1)
        theta_joint = theta0 - eta * (g_a + exp.loss_b.grad(theta0))
        gaps.append(float(np.linalg.norm(theta_seq - theta_joint)))
    return np.array(gaps)


@dataclass
class GapResult:
    etas: list[float]
    gaps: np.ndarray
    slope: float
    intercept: float

    def to_csv(self) -> str:
        lines = ["eta,gap"]
        for eta, gap in zip(self.etas, self.gaps):
            lines.append(f"{eta!r},{gap!r}")
        return "\n".join(lines) + "\n"


def theorem_gap(exp: GapExperiment) -> GapResult:
    """Measure gaps and fit the log-log slope of gap versus step size.

    Raises ``DegenerateGapError`` when every gap is numerically zero (the
    two losses commute, so there is nothing to fit).
    """
    gaps = measure_gaps(exp)
    if gaps.max() < 1e-14:
        raise DegenerateGapError("all gaps below 1e-14; losses commute")
    logs_eta = np.log(np.asarray(exp.etas, dtype=np.float64))
    logs_gap = np.log(gaps)
    a = np.vstack([logs_eta, np.ones_like(logs_eta)]).T
    (slope, intercept), *_ = np.linalg.lstsq(a, logs_gap, rcond=None)
    return GapResult(etas=list(exp.etas), gaps=gaps,
                     slope=float(slope), intercept=float(intercept))


def surrogate_objective_grad(model: MlpModel, seq) -> np.ndarray:
    """Gradient of the summed task losses plus the joint loss, w.r.t. the
    flat backbone parameters, with every term evaluated at the current
    parameters."""
    if not seq.tasks:
        raise ValueError("pseudo sequence has no tasks")
    total = np.zeros_like(flatten_backbone(model))
    for xs, ys in seq.tasks:
        loss_fn = MlpBatchLoss(model, xs, ys, np.unique(ys))
        total += loss_fn.grad(flatten_backbone(model))
    joint_fn = MlpBatchLoss(model, seq.joint_xs, seq.joint_ys, np.unique(seq.joint_ys))
    total += joint_fn.grad(flatten_backbone(model))
    return total


def metrics_summary(a_auc: float, a_last: float, forgetting: float,
                    seed: int, config_hash: str) -> dict:
    return {
        "a_auc": a_auc,
        "a_last": a_last,
        "forgetting": forgetting,
        "seed": seed,
        "config_hash": config_hash,
    }
