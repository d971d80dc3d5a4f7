"""L-infinity adversarial attacks: FGSM, PGD, temperature-PGD, transfer.

All attacks share one iteration core: sign-gradient ascent on a loss, with
the perturbation projected back into the epsilon-ball after every step and
the image clamped to the [0, 1] pixel box.  FGSM is the single-step special
case; temperature-PGD routes the loss gradient through a temperature-scaled
softmax; the transfer attack crafts on a substitute model and scores on the
target.

Determinism: the random start for example `i` is drawn from a generator
seeded with ``spec.seed ^ index[i]``, so results do not depend on how a
dataset is split into batches, and two runs with equal (model, spec, seed)
produce bit-identical perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import Classifier

ATTACK_FAMILIES = ("fgsm", "pgd", "tpgd", "transfer")
BALL_SLACK = 1e-6  # float32 rounding allowance on the L-inf constraint


@dataclass(frozen=True)
class AttackSpec:
    family: str
    epsilon: float
    alpha: float
    steps: int = 1
    random_start: bool = False
    inv_temperature: float = 1.0
    seed: int = 0
    norm: str = "linf"

    def __post_init__(self):
        if self.family not in ATTACK_FAMILIES:
            raise ValueError(f"attack: unknown family {self.family!r}")
        if self.norm != "linf":
            raise ValueError(f"attack: only the linf norm is supported, got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError("attack: epsilon must be >= 0")
        if self.alpha <= 0:
            raise ValueError("attack: alpha must be > 0")
        if self.steps < 1:
            raise ValueError("attack: steps must be >= 1")
        if self.inv_temperature <= 0:
            raise ValueError("attack: inverse temperature must be > 0")
        if self.family != "tpgd" and self.inv_temperature != 1.0:
            raise ValueError("attack: inv_temperature != 1 is only valid for tpgd")

    def to_config(self) -> dict:
        return {
            "family": self.family,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "steps": self.steps,
            "random_start": self.random_start,
            "inv_temperature": self.inv_temperature,
            "seed": self.seed,
        }

    @staticmethod
    def from_config(d: dict) -> "AttackSpec":
        return AttackSpec(
            family=d["family"],
            epsilon=float(d["epsilon"]),
            alpha=float(d["alpha"]),
            steps=int(d.get("steps", 1)),
            random_start=bool(d.get("random_start", False)),
            inv_temperature=float(d.get("inv_temperature", 1.0)),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class AdversarialBatch:
    """Perturbed images plus per-example outcome bookkeeping.

    `confound` is the model's prediction on the perturbed image; an example
    counts as an attack success exactly when that prediction differs from the
    ground-truth label (so naturally misclassified examples count as
    successes too, keeping robust accuracy a plain test-set fraction).
    """

    adversarial: np.ndarray       # (N, C, H, W)
    predictions: np.ndarray       # (N,) prediction at the final iterate
    success: np.ndarray           # (N,) bool, prediction != ground truth
    confound: np.ndarray          # (N,) == predictions
    labels: np.ndarray            # (N,) ground truth
    indices: np.ndarray           # (N,) example ids the per-example seeds used

    @property
    def robust_accuracy(self) -> float:
        return float(1.0 - self.success.mean())

    def per_class_robust(self, class_count: int) -> np.ndarray:
        """Fraction robust per ground-truth class; NaN for absent classes."""
        counts = np.bincount(self.labels, minlength=class_count).astype(np.float64)
        correct = np.bincount(self.labels[~self.success], minlength=class_count)
        with np.errstate(invalid="ignore"):
            return np.where(counts > 0, correct / counts, np.nan)


def _random_start(shape, epsilon, base_seed, indices, dtype):
    delta = np.empty((len(indices),) + shape, dtype=dtype)
    for row, idx in enumerate(indices):
        rng = np.random.default_rng(int(base_seed) ^ int(idx))
        delta[row] = rng.uniform(-epsilon, epsilon, shape)
    return delta


def _input_gradient(model, x_adv, labels, inv_temperature, kl_reference):
    """d(loss)/d(input) at x_adv; loss is mean CE, or mean KL(ref || p) when
    a reference distribution is given (the robustness-regularizer inner
    maximization)."""
    xt = Tensor(x_adv, requires_grad=True)
    probs = ad.softmax_temperature(model.logits(xt), inv_temperature)
    if kl_reference is None:
        per_example = ad.cross_entropy(probs, labels)
    else:
        per_example = ad.kl_divergence(Tensor(kl_reference), probs)
    ad.backward(ad.mean(per_example), wrt=[xt])
    return xt.grad, per_example.data


def iterate_pgd(model: Classifier, images: np.ndarray, labels: np.ndarray,
                spec: AttackSpec, indices: np.ndarray,
                kl_reference: np.ndarray | None = None,
                keep: str = "final") -> np.ndarray:
    """The shared attack core; returns perturbed images.

    keep="final" returns the last iterate (the attack convention);
    keep="best" returns, per example, the iterate with the highest loss seen,
    including the start point (the adversarial-training convention, which
    makes the robust loss provably >= the natural loss when there is no
    random start).
    """
    x = np.asarray(images, dtype=model.dtype)
    eps = model.dtype.type(spec.epsilon)
    alpha = model.dtype.type(spec.alpha)
    if spec.random_start and spec.epsilon > 0:
        delta = _random_start(x.shape[1:], spec.epsilon, spec.seed, indices, x.dtype)
    else:
        delta = np.zeros_like(x)

    track_best = keep == "best"
    best_x = best_loss = None
    for _ in range(spec.steps):
        x_adv = np.clip(x + delta, 0.0, 1.0)
        grad, losses = _input_gradient(model, x_adv, labels, spec.inv_temperature, kl_reference)
        if track_best:
            if best_loss is None:
                best_x, best_loss = x_adv, losses
            else:
                better = losses > best_loss
                best_x = np.where(better[:, None, None, None], x_adv, best_x)
                best_loss = np.maximum(losses, best_loss)
        delta = np.clip(delta + alpha * np.sign(grad), -eps, eps)

    x_adv = np.clip(x + delta, 0.0, 1.0)
    if track_best:
        _, losses = _input_gradient(model, x_adv, labels, spec.inv_temperature, kl_reference)
        better = losses > best_loss
        x_adv = np.where(better[:, None, None, None], x_adv, best_x)
    return x_adv


def _run(model: Classifier, score_model: Classifier, images, labels, spec,
         indices=None, batch_size: int = 256) -> AdversarialBatch:
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"attack: {images.shape[0]} images but {labels.shape[0]} labels")
    if indices is None:
        indices = np.arange(images.shape[0])
    indices = np.asarray(indices)
    adv = np.empty_like(images, dtype=model.dtype)
    preds = np.empty(images.shape[0], dtype=np.int64)
    for lo in range(0, images.shape[0], batch_size):
        sl = slice(lo, lo + batch_size)
        adv[sl] = iterate_pgd(model, images[sl], labels[sl], spec, indices[sl])
        preds[sl] = score_model.predict(adv[sl])
    success = preds != labels
    return AdversarialBatch(
        adversarial=adv, predictions=preds, success=success,
        confound=preds.copy(), labels=labels.copy(), indices=indices.copy(),
    )


def fgsm(model: Classifier, images, labels, epsilon: float,
         batch_size: int = 256, indices=None) -> AdversarialBatch:
    """Single sign-gradient step of size epsilon (sign(0) = 0), clamped to
    the epsilon-ball intersected with [0, 1]."""
    spec = AttackSpec(family="fgsm", epsilon=epsilon,
                      alpha=max(epsilon, np.finfo(np.float32).tiny), steps=1)
    return _run(model, model, images, labels, spec, indices, batch_size)


def pgd(model: Classifier, images, labels, spec: AttackSpec,
        batch_size: int = 256, indices=None) -> AdversarialBatch:
    if spec.family not in ("pgd", "tpgd", "fgsm"):
        raise ValueError(f"pgd: spec family {spec.family!r} is not a pgd-family attack")
    return _run(model, model, images, labels, spec, indices, batch_size)


def temperature_pgd(model: Classifier, images, labels, spec: AttackSpec,
                    batch_size: int = 256, indices=None) -> AdversarialBatch:
    """PGD whose loss gradient flows through softmax(logits / T)."""
    if spec.family != "tpgd":
        raise ValueError(f"temperature_pgd: spec family must be tpgd, got {spec.family!r}")
    return _run(model, model, images, labels, spec, indices, batch_size)


def transfer_attack(substitute: Classifier, target: Classifier, images, labels,
                    spec: AttackSpec, batch_size: int = 256, indices=None) -> AdversarialBatch:
    """Craft perturbations against `substitute`, score success on `target`."""
    if substitute.spec.input_shape != target.spec.input_shape:
        raise ValueError(
            f"transfer: substitute input {substitute.spec.input_shape} != "
            f"target input {target.spec.input_shape}"
        )
    if substitute.spec.class_count != target.spec.class_count:
        raise ValueError("transfer: substitute and target class counts differ")
    return _run(substitute, target, images, labels, spec, indices, batch_size)


def run_attack(model: Classifier, images, labels, spec: AttackSpec,
               substitute: Classifier | None = None, batch_size: int = 256,
               indices=None) -> AdversarialBatch:
    """Dispatch on spec.family; `substitute` is required for transfer."""
    if spec.family == "transfer":
        if substitute is None:
            raise ValueError("attack: transfer attack needs a substitute model")
        inner = replace(spec, family="pgd")
        return transfer_attack(substitute, model, images, labels, inner, batch_size, indices)
    if spec.family == "fgsm":
        return fgsm(model, images, labels, spec.epsilon, batch_size, indices)
    if spec.family == "tpgd":
        return temperature_pgd(model, images, labels, spec, batch_size, indices)
    return pgd(model, images, labels, spec, batch_size, indices)
