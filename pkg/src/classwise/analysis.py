"""Class-wise diagnostics: per-class accuracy, dispersion metrics, confusion
matrices, misclassification bookkeeping, and the class-removal retraining
("homing") experiment.

Conventions: accuracies are fractions in [0, 1] everywhere inside the
library; conversion to percent happens only at the reporting boundary.
Classes with no test examples are reported as NaN and excluded from the
dispersion metrics.
"""

from __future__ import annotations

import datetime as _dt
import io
import csv
from dataclasses import dataclass, field

import numpy as np

from .attacks import AdversarialBatch, AttackSpec, run_attack
from .datasets import LabeledDataset, remove_class
from .fileio import atomic_write_text, float_cell, write_json
from .models import ArchitectureSpec, Classifier, init_model
from .training import TrainSpec, train


def classwise_accuracy(predictions, labels, class_count: int) -> np.ndarray:
    """Fraction correct per ground-truth class; NaN where a class is absent."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("classwise_accuracy: predictions and labels differ in length")
    if labels.size and labels.max() >= class_count:
        raise ValueError(f"classwise_accuracy: label outside [0, {class_count})")
    counts = np.bincount(labels, minlength=class_count).astype(np.float64)
    correct = np.bincount(labels[predictions == labels], minlength=class_count)
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, correct / counts, np.nan)


def classwise_variance(accuracies) -> float:
    """Population variance of the per-class accuracy vector: mean (a_c - abar)^2."""
    a = np.asarray(accuracies, dtype=np.float64)
    a = a[~np.isnan(a)]
    if a.size == 0:
        raise ValueError("classwise_variance: empty accuracy vector")
    return float(((a - a.mean()) ** 2).mean())


def max_classwise_discrepancy(accuracies) -> float:
    """Largest minus smallest per-class accuracy."""
    a = np.asarray(accuracies, dtype=np.float64)
    a = a[~np.isnan(a)]
    if a.size == 0:
        raise ValueError("max_classwise_discrepancy: empty accuracy vector")
    return float(a.max() - a.min())


# The short names are the ones used in reports and tables.
cv = classwise_variance
mcd = max_classwise_discrepancy


def confidence_variance(confidences) -> float:
    """Smoothness of a class's confidence outputs: for N probability rows over
    C classes, (1/(N*C)) * sum_i sum_c (p_c^i - pbar^i)^2, i.e. the mean
    per-image population variance.  NaN for an empty class."""
    p = np.asarray(confidences, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"confidence_variance: expected (N, C) rows, got {p.shape}")
    if p.shape[0] == 0:
        return float("nan")
    centered = p - p.mean(axis=1, keepdims=True)
    return float((centered ** 2).sum() / p.size)


cvc = confidence_variance


@dataclass
class ConfusionMatrix:
    """Row-normalized prediction counts: entry (i, j) is the fraction of
    class-i examples predicted as j.  Rows without examples are all-zero and
    listed in `empty_rows`."""

    matrix: np.ndarray            # (C, C) fractions
    counts: np.ndarray            # (C, C) raw counts
    empty_rows: list[int]

    @property
    def class_count(self) -> int:
        return self.matrix.shape[0]

    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal().copy()

    def to_csv(self, path) -> None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(range(self.class_count)))
        for row in self.matrix:
            writer.writerow([float_cell(v) for v in row])
        atomic_write_text(path, buf.getvalue())


def confusion(predictions, labels, class_count: int) -> ConfusionMatrix:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("confusion: predictions and labels differ in length")
    if labels.size and (labels.max() >= class_count or predictions.max() >= class_count):
        raise ValueError(f"confusion: class id outside [0, {class_count})")
    flat = labels * class_count + predictions
    counts = np.bincount(flat, minlength=class_count * class_count)
    counts = counts.reshape(class_count, class_count)
    row_totals = counts.sum(axis=1)
    empty = np.flatnonzero(row_totals == 0)
    safe = np.where(row_totals > 0, row_totals, 1)
    matrix = counts / safe[:, None]
    return ConfusionMatrix(matrix=matrix, counts=counts, empty_rows=[int(i) for i in empty])


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

@dataclass
class ClasswiseReport:
    class_count: int
    natural_total: float
    natural_per_class: list[float]
    robust_total: float
    robust_per_class: list[float]
    cv_robust: float
    mcd_robust: float
    cv_natural: float
    mcd_natural: float
    cvc_per_class: list[float]
    natural_confusion: ConfusionMatrix
    adversarial_confusion: ConfusionMatrix
    metadata: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        def _clean(values):
            return [None if np.isnan(v) else float(v) for v in values]

        return {
            "class_count": self.class_count,
            "natural_accuracy": {
                "total": self.natural_total,
                "per_class": _clean(self.natural_per_class),
            },
            "robust_accuracy": {
                "total": self.robust_total,
                "per_class": _clean(self.robust_per_class),
            },
            "cv": self.cv_robust,
            "mcd": self.mcd_robust,
            "cv_natural": self.cv_natural,
            "mcd_natural": self.mcd_natural,
            "cvc_per_class": _clean(self.cvc_per_class),
            "metadata": self.metadata,
        }

    def write(self, path) -> None:
        write_json(path, self.to_json_dict())


def build_report(model: Classifier, test_ds: LabeledDataset, attack: AttackSpec,
                 substitute: Classifier | None = None, batch_size: int = 256,
                 metadata: dict | None = None,
                 adversarial: AdversarialBatch | None = None) -> ClasswiseReport:
    """Attack the test set and assemble every class-wise diagnostic.

    Confidence-smoothness values are computed from the natural (unattacked)
    softmax outputs of the test set; that choice is recorded in metadata.
    """
    c = test_ds.class_count
    nat_pred = model.predict(test_ds.images, batch_size=batch_size)
    nat_probs = model.probabilities(test_ds.images, batch_size=batch_size)
    if adversarial is None:
        adversarial = run_attack(model, test_ds.images, test_ds.labels, attack,
                                 substitute=substitute, batch_size=batch_size)
    nat_acc = classwise_accuracy(nat_pred, test_ds.labels, c)
    rob_acc = classwise_accuracy(adversarial.predictions, test_ds.labels, c)
    cvc_values = [
        confidence_variance(nat_probs[test_ds.labels == k]) for k in range(c)
    ]
    meta = {
        "attack": attack.to_config(),
        "model_checkpoint": model.fingerprint(),
        "cvc_mode": "natural",
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    if metadata:
        meta.update(metadata)
    return ClasswiseReport(
        class_count=c,
        natural_total=float((nat_pred == test_ds.labels).mean()),
        natural_per_class=[float(v) for v in nat_acc],
        robust_total=adversarial.robust_accuracy,
        robust_per_class=[float(v) for v in rob_acc],
        cv_robust=classwise_variance(rob_acc),
        mcd_robust=max_classwise_discrepancy(rob_acc),
        cv_natural=classwise_variance(nat_acc),
        mcd_natural=max_classwise_discrepancy(nat_acc),
        cvc_per_class=cvc_values,
        natural_confusion=confusion(nat_pred, test_ds.labels, c),
        adversarial_confusion=confusion(adversarial.predictions, test_ds.labels, c),
        metadata=meta,
    )


# ---------------------------------------------------------------------------
# misclassification bookkeeping and the class-removal experiment
# ---------------------------------------------------------------------------

@dataclass
class HomingMatrices:
    """Counts of attack-flipped examples (M) and of those that become robust
    after retraining without their confound class (H); both C x C with zero
    diagonals and H <= M cellwise.  `cell_ids` maps (truth, confound) to the
    dataset indices behind M."""

    misclassified: np.ndarray
    homing: np.ndarray
    cell_ids: dict[tuple[int, int], list[int]]

    def top_cell(self) -> tuple[int, int]:
        flat = int(np.argmax(self.misclassified))
        c = self.misclassified.shape[0]
        return flat // c, flat % c


def misclassified_matrix(batch: AdversarialBatch, labels, class_count: int):
    """M[i][j] = number of class-i examples whose adversarial prediction was
    j (i != j), plus the example ids behind every cell."""
    labels = np.asarray(labels)
    if labels.shape != batch.predictions.shape:
        raise ValueError("misclassified_matrix: batch and labels differ in length")
    m = np.zeros((class_count, class_count), dtype=np.int64)
    cell_ids: dict[tuple[int, int], list[int]] = {}
    flipped = np.flatnonzero(batch.predictions != labels)
    for pos in flipped:
        i, j = int(labels[pos]), int(batch.predictions[pos])
        m[i, j] += 1
        cell_ids.setdefault((i, j), []).append(int(batch.indices[pos]))
    return m, cell_ids


def assemble_homing(m: np.ndarray, robust_counts: dict[tuple[int, int], int],
                    cell_ids: dict[tuple[int, int], list[int]]) -> HomingMatrices:
    """Build the homing matrix from per-cell now-robust counts, enforcing the
    0 <= H <= M bound."""
    h = np.zeros_like(m)
    for (i, j), count in robust_counts.items():
        if not 0 <= count <= m[i, j]:
            raise ValueError(
                f"homing: cell ({i}, {j}) reports {count} robust examples "
                f"but only {m[i, j]} were misclassified"
            )
        h[i, j] = count
    return HomingMatrices(misclassified=m.copy(), homing=h, cell_ids=dict(cell_ids))


def homing_experiment(arch: ArchitectureSpec, train_ds: LabeledDataset,
                      test_ds: LabeledDataset, attack: AttackSpec,
                      train_spec: TrainSpec, confound_classes=None,
                      baseline: Classifier | None = None,
                      batch_size: int = 256) -> HomingMatrices:
    """For each confound class j: retrain from scratch (same spec and seed)
    on the training set with class j removed, re-attack exactly the examples
    that had confound class j, and count how many are now robust (their
    adversarial prediction returns to the ground-truth class).

    `confound_classes` restricts the retraining sweep (default: every class
    with a nonzero column); `baseline` skips retraining the reference model.
    """
    if baseline is None:
        baseline, _ = train(init_model(arch, train_spec.seed), train_ds, train_spec)
    base_batch = run_attack(baseline, test_ds.images, test_ds.labels, attack,
                            batch_size=batch_size)
    m, cell_ids = misclassified_matrix(base_batch, test_ds.labels, test_ds.class_count)
    if confound_classes is None:
        confound_classes = [j for j in range(test_ds.class_count) if m[:, j].sum() > 0]
    robust_counts: dict[tuple[int, int], int] = {}
    for j in confound_classes:
        column_ids = sorted(
            idx for (i, jj), ids in cell_ids.items() if jj == j for idx in ids
        )
        if not column_ids:
            continue
        retrained, _ = train(
            init_model(arch, train_spec.seed), remove_class(train_ds, j), train_spec,
        )
        ids = np.asarray(column_ids)
        redo = run_attack(retrained, test_ds.images[ids], test_ds.labels[ids],
                          attack, batch_size=batch_size, indices=ids)
        homed = redo.predictions == test_ds.labels[ids]
        for (i, jj), members in cell_ids.items():
            if jj != j:
                continue
            members = np.asarray(members)
            mask = np.isin(ids, members)
            robust_counts[(i, j)] = int(homed[mask].sum())
    return assemble_homing(m, robust_counts, cell_ids)


def write_count_matrix(path, matrix: np.ndarray) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(range(matrix.shape[0])))
    for row in matrix:
        writer.writerow([int(v) for v in row])
    atomic_write_text(path, buf.getvalue())
