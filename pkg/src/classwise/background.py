"""Background studies: class-colored backgrounds at training time, and
white-background replacement at inference time.

The colorized study quantifies how much of the attack-induced confusion
lands inside groups of classes that share a background color ("within-group
flip mass"), compared against both the natural-image confusion and the mass
expected if flips were spread uniformly over wrong classes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .analysis import ConfusionMatrix, confusion
from .attacks import AttackSpec, run_attack
from .datasets import (
    BackgroundPlan,
    LabeledDataset,
    colorize_background,
    foreground_mask,
    replace_background_with_mask,
)
from .fileio import atomic_write_text, float_cell
from .models import ArchitectureSpec, Classifier, init_model
from .training import TrainSpec, train


def within_group_mass(counts: np.ndarray, groups) -> float:
    """Fraction of off-diagonal confusion counts whose source and destination
    classes share a group.  An empty off-diagonal is vacuously 1."""
    groups = np.asarray(groups)
    c = counts.shape[0]
    if groups.shape != (c,):
        raise ValueError(f"within_group_mass: {groups.size} group ids for {c} classes")
    off = counts * (1 - np.eye(c, dtype=counts.dtype))
    total = off.sum()
    if total == 0:
        return 1.0
    same = groups[:, None] == groups[None, :]
    return float(off[same].sum() / total)


def expected_within_group_mass(counts: np.ndarray, groups) -> float:
    """Within-group mass if each class's flips were uniform over the other
    C-1 classes; rows are weighted by their share of the off-diagonal mass."""
    groups = np.asarray(groups)
    c = counts.shape[0]
    off_per_row = counts.sum(axis=1) - counts.diagonal()
    total = off_per_row.sum()
    if total == 0:
        return 1.0
    group_sizes = np.bincount(groups, minlength=groups.max() + 1)
    same_wrong = group_sizes[groups] - 1          # in-group wrong targets per class
    return float((off_per_row * same_wrong / (c - 1)).sum() / total)


@dataclass
class BackgroundStudyResult:
    natural_confusion: ConfusionMatrix
    adversarial_confusion: ConfusionMatrix
    within_group_natural: float
    within_group_adversarial: float
    expected_random_mass: float
    groups: list[int]
    model: Classifier = field(repr=False)
    colorized_train: LabeledDataset = field(repr=False)
    colorized_test: LabeledDataset = field(repr=False)

    def summary_dict(self) -> dict:
        return {
            "groups": self.groups,
            "within_group_natural": self.within_group_natural,
            "within_group_adversarial": self.within_group_adversarial,
            "expected_random_mass": self.expected_random_mass,
            "model_checkpoint": self.model.fingerprint(),
        }


def run_background_study(gray_train: LabeledDataset, gray_test: LabeledDataset,
                         train_plan: BackgroundPlan, test_plan: BackgroundPlan,
                         arch: ArchitectureSpec, train_spec: TrainSpec,
                         attack: AttackSpec,
                         batch_size: int = 256) -> BackgroundStudyResult:
    """Colorize backgrounds per class, train on the colorized training set,
    attack the colorized test set, and measure how the flips align with the
    background groups (taken from the test plan's color sharing)."""
    if arch.input_shape[0] != 3:
        raise ValueError("background study: model must take 3-channel input")
    ctrain = colorize_background(gray_train, train_plan)
    ctest = colorize_background(gray_test, test_plan)
    model, _ = train(init_model(arch, train_spec.seed), ctrain, train_spec)
    nat_pred = model.predict(ctest.images, batch_size=batch_size)
    adv = run_attack(model, ctest.images, ctest.labels, attack, batch_size=batch_size)
    nat_conf = confusion(nat_pred, ctest.labels, ctest.class_count)
    adv_conf = confusion(adv.predictions, ctest.labels, ctest.class_count)
    groups = test_plan.groups()
    return BackgroundStudyResult(
        natural_confusion=nat_conf,
        adversarial_confusion=adv_conf,
        within_group_natural=within_group_mass(nat_conf.counts, groups),
        within_group_adversarial=within_group_mass(adv_conf.counts, groups),
        expected_random_mass=expected_within_group_mass(adv_conf.counts, groups),
        groups=groups,
        model=model,
        colorized_train=ctrain,
        colorized_test=ctest,
    )


@dataclass
class InferenceAdjustResult:
    """Per-predicted-class counts for one ground-truth class, before and
    after replacing the background with white, for natural and adversarial
    inputs.  Every count row sums to the number of evaluated images."""

    target_class: int
    n_images: int
    natural_before: np.ndarray
    natural_after: np.ndarray
    adversarial_before: np.ndarray
    adversarial_after: np.ndarray

    def delta(self, phase: str) -> np.ndarray:
        before, after = self._rows(phase)
        return after - before

    def _rows(self, phase: str):
        if phase == "natural":
            return self.natural_before, self.natural_after
        if phase == "adversarial":
            return self.adversarial_before, self.adversarial_after
        raise ValueError(f"inference adjust: unknown phase {phase!r}")

    def correct_counts(self, phase: str) -> tuple[int, int]:
        before, after = self._rows(phase)
        return int(before[self.target_class]), int(after[self.target_class])

    def format_delta(self, phase: str) -> str:
        """E.g. '403(+141)' for the after-count of the target class."""
        before, after = self.correct_counts(phase)
        return f"{after}({after - before:+d})"

    def to_csv(self, path, phase: str) -> None:
        before, after = self._rows(phase)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["predicted_class", "count_before", "count_after", "delta"])
        for cls, (b, a) in enumerate(zip(before, after)):
            writer.writerow([cls, int(b), int(a), f"{int(a) - int(b):+d}"])
        atomic_write_text(path, buf.getvalue())

    def summary_dict(self) -> dict:
        return {
            "target_class": self.target_class,
            "n_images": self.n_images,
            "natural": {
                "before": [int(v) for v in self.natural_before],
                "after": [int(v) for v in self.natural_after],
            },
            "adversarial": {
                "before": [int(v) for v in self.adversarial_before],
                "after": [int(v) for v in self.adversarial_after],
            },
        }


def _counts(predictions, class_count) -> np.ndarray:
    return np.bincount(predictions, minlength=class_count)


def run_inference_adjust(model: Classifier, ds: LabeledDataset, target_class: int,
                         attack: AttackSpec, tau_fg: float,
                         batch_size: int = 256) -> InferenceAdjustResult:
    """Evaluate all test images of `target_class` natural and attacked, on
    the originals and on copies whose background (pixels outside the
    threshold-derived foreground mask) is replaced with white."""
    if not 0 <= target_class < ds.class_count:
        raise ValueError(f"inference adjust: class {target_class} outside [0, {ds.class_count})")
    ids = np.flatnonzero(ds.labels == target_class)
    images = ds.images[ids]
    labels = ds.labels[ids]
    white = (1.0,) * ds.image_shape[0]
    replaced = np.stack([
        replace_background_with_mask(img, foreground_mask(img, tau_fg), white)
        for img in images
    ])

    nat_before = model.predict(images, batch_size=batch_size)
    nat_after = model.predict(replaced, batch_size=batch_size)
    adv_before = run_attack(model, images, labels, attack,
                            batch_size=batch_size, indices=ids)
    adv_after = run_attack(model, replaced, labels, attack,
                           batch_size=batch_size, indices=ids)
    c = ds.class_count
    return InferenceAdjustResult(
        target_class=target_class,
        n_images=len(ids),
        natural_before=_counts(nat_before, c),
        natural_after=_counts(nat_after, c),
        adversarial_before=_counts(adv_before.predictions, c),
        adversarial_after=_counts(adv_after.predictions, c),
    )
