"""Training objectives and the SGD loop.

Four objectives:

* ``standard``          - cross-entropy on natural examples
* ``madry``             - cross-entropy on PGD examples (min-max training)
* ``trades``            - natural cross-entropy + beta * max KL(p(x) || p(x'))
* ``trades_classwise``  - same, with a per-class beta vector; each example is
                          weighted by beta[label]

Inner attacks are regenerated per batch against the current parameters and
are treated as data by the outer loss: gradients never flow back through the
attack-generation path.  The Madry inner maximization keeps the iterate with
the highest per-example loss (including the start point), so the robust loss
is never below the natural loss when the attack starts at x.

All randomness derives from TrainSpec.seed: the epoch shuffle from
(seed, epoch), the per-batch inner-attack seed from (seed, epoch, batch), and
per-example random starts from that base xor the example's dataset index.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackSpec, iterate_pgd, run_attack
from .autodiff import Tensor
from .datasets import LabeledDataset
from .fileio import atomic_write_text, float_cell
from .models import Classifier

OBJECTIVES = ("standard", "madry", "trades", "trades_classwise")


@dataclass(frozen=True)
class TrainSpec:
    objective: str
    epochs: int
    batch_size: int
    lr: float
    milestones: tuple[int, ...] = ()
    lr_decay: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 2e-4
    beta: float | tuple[float, ...] | None = None
    inner_attack: AttackSpec | None = None
    eval_attack: AttackSpec | None = None
    eval_subset: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"train: unknown objective {self.objective!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("train: epochs and batch_size must be >= 1")
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ValueError("train: milestone epochs must be strictly increasing")
        if self.objective in ("madry", "trades", "trades_classwise"):
            if self.inner_attack is None:
                raise ValueError(f"train: objective {self.objective} needs an inner attack")
            if self.inner_attack.family not in ("pgd", "tpgd", "fgsm"):
                raise ValueError("train: inner attack must be a pgd-family attack")
        if self.objective in ("trades", "trades_classwise"):
            if self.beta is None:
                raise ValueError("train: trades objectives need beta")
            betas = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
            if (betas < 0).any():
                raise ValueError("train: beta entries must be >= 0")

    def beta_vector(self, class_count: int) -> np.ndarray:
        b = np.atleast_1d(np.asarray(self.beta, dtype=np.float64))
        if b.size == 1:
            return np.full(class_count, float(b[0]))
        if b.size != class_count:
            raise ValueError(f"train: beta vector has {b.size} entries for {class_count} classes")
        return b.astype(np.float64)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    nat_acc: float
    rob_acc_total: float
    rob_acc_per_class: list[float]


@dataclass
class TrainLog:
    class_count: int
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["epoch", "lr", "train_loss", "nat_acc", "rob_acc_total"]
        header += [f"rob_acc_class_{c}" for c in range(self.class_count)]
        writer.writerow(header)
        for r in self.records:
            row = [r.epoch, float_cell(r.lr), float_cell(r.train_loss),
                   float_cell(r.nat_acc), float_cell(r.rob_acc_total)]
            row += [float_cell(v) for v in r.rob_acc_per_class]
            writer.writerow(row)
        atomic_write_text(path, buf.getvalue())


def lr_at(spec: TrainSpec, epoch: int) -> float:
    """Initial lr divided by the decay factor once per passed milestone
    (a milestone counts as passed when epoch >= milestone)."""
    if epoch < 0:
        raise ValueError("lr_at: epoch must be >= 0")
    passed = sum(1 for m in spec.milestones if epoch >= m)
    return spec.lr / spec.lr_decay ** passed


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float, weight_decay: float):
    """One SGD step with momentum and L2 weight decay folded into the
    gradient: g' = grad + wd * param; v' = mu * v + g'; param' = param - lr * v'."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError("sgd_step: param/grad/velocity shapes differ")
    g = grad + weight_decay * param
    v = momentum * velocity + g
    return param - lr * v, v


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# inner maximization (adversarial example crafting for the outer losses)
# ---------------------------------------------------------------------------

def madry_examples(model: Classifier, images, labels, spec: AttackSpec,
                   indices=None) -> np.ndarray:
    """Cross-entropy PGD with best-iterate tracking (start point included)."""
    images = np.asarray(images)
    if indices is None:
        indices = np.arange(images.shape[0])
    return iterate_pgd(model, images, labels, spec, np.asarray(indices), keep="best")


def trades_examples(model: Classifier, images, spec: AttackSpec,
                    indices=None) -> np.ndarray:
    """PGD ascent on KL(p(x) || p(x + delta)) with p(x) held fixed."""
    images = np.asarray(images)
    if indices is None:
        indices = np.arange(images.shape[0])
    reference = model.probabilities(images)
    dummy_labels = np.zeros(images.shape[0], dtype=np.int64)
    return iterate_pgd(model, images, dummy_labels, spec, np.asarray(indices),
                       kl_reference=reference)


# ---------------------------------------------------------------------------
# losses (scalar tape nodes; adversarial inputs are data, not tape)
# ---------------------------------------------------------------------------

def loss_standard(model: Classifier, images, labels) -> Tensor:
    probs = ad.softmax_temperature(model.logits(np.asarray(images, dtype=model.dtype)))
    return ad.mean(ad.cross_entropy(probs, labels))


def loss_madry(model: Classifier, images, labels, inner: AttackSpec,
               indices=None, adversarial=None) -> Tensor:
    """Mean cross-entropy on inner-attack examples crafted against the
    current parameters.  Pass `adversarial` to reuse precomputed examples."""
    if adversarial is None:
        adversarial = madry_examples(model, images, labels, inner, indices)
    return loss_standard(model, adversarial, labels)


def loss_trades_classwise(model: Classifier, images, labels, beta,
                          inner: AttackSpec, indices=None, adversarial=None) -> Tensor:
    """Natural cross-entropy plus the per-class-weighted KL regularizer:
    mean_i [ CE(p(x_i), y_i) + beta[y_i] * KL(p(x_i) || p(x'_i)) ]."""
    labels = np.asarray(labels, dtype=np.int64)
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size != model.spec.class_count:
        raise ValueError(
            f"trades: beta vector has {beta.size} entries for "
            f"{model.spec.class_count} classes"
        )
    if (beta < 0).any():
        raise ValueError("trades: beta entries must be >= 0")
    x = np.asarray(images, dtype=model.dtype)
    probs_nat = ad.softmax_temperature(model.logits(x))
    ce = ad.mean(ad.cross_entropy(probs_nat, labels))
    if not beta.any():
        return ce
    if adversarial is None:
        adversarial = trades_examples(model, x, inner, indices)
    probs_adv = ad.softmax_temperature(model.logits(adversarial))
    kl = ad.kl_divergence(probs_nat, probs_adv)
    weighted = ad.scale(kl, beta[labels].astype(x.dtype))
    return ad.add(ce, ad.mean(weighted))


def loss_trades(model: Classifier, images, labels, beta: float, inner: AttackSpec,
                indices=None, adversarial=None) -> Tensor:
    vector = np.full(model.spec.class_count, float(beta))
    return loss_trades_classwise(model, images, labels, vector, inner, indices, adversarial)


def _batch_loss(model: Classifier, spec: TrainSpec, images, labels, indices,
                inner: AttackSpec | None) -> Tensor:
    if spec.objective == "standard":
        return loss_standard(model, images, labels)
    if spec.objective == "madry":
        return loss_madry(model, images, labels, inner, indices)
    beta = spec.beta_vector(model.spec.class_count)
    return loss_trades_classwise(model, images, labels, beta, inner, indices)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _per_class_accuracy(predictions, labels, class_count) -> np.ndarray:
    counts = np.bincount(labels, minlength=class_count).astype(np.float64)
    correct = np.bincount(labels[predictions == labels], minlength=class_count)
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, correct / counts, np.nan)


def _eval_epoch(model, test_ds, eval_idx, spec) -> tuple[float, float, list[float]]:
    images = test_ds.images[eval_idx]
    labels = test_ds.labels[eval_idx]
    nat_acc = float((model.predict(images) == labels).mean())
    if spec.eval_attack is None:
        return nat_acc, float("nan"), [float("nan")] * test_ds.class_count
    batch = run_attack(model, images, labels, spec.eval_attack, indices=eval_idx)
    per_class = batch.per_class_robust(test_ds.class_count)
    return nat_acc, batch.robust_accuracy, [float(v) for v in per_class]


def train(model: Classifier, train_ds: LabeledDataset, spec: TrainSpec,
          test_ds: LabeledDataset | None = None) -> tuple[Classifier, TrainLog]:
    """Shuffled minibatch SGD; returns a new Classifier and the epoch log.

    If `test_ds` is given, natural and per-class robust accuracy are measured
    each epoch with spec.eval_attack on a fixed stratified subset of
    spec.eval_subset examples (the full test set when unset).  That
    evaluation is the dominant cost for multi-step eval attacks; shrink
    eval_subset if the per-epoch curves only need to be indicative.
    """
    if train_ds.class_count != model.spec.class_count:
        raise ValueError(
            f"train: dataset has {train_ds.class_count} classes but model "
            f"outputs {model.spec.class_count}"
        )
    model = model.copy()
    velocities = {k: np.zeros_like(t.data) for k, t in model.params.items()}
    log = TrainLog(class_count=train_ds.class_count)
    n = len(train_ds)

    eval_idx = None
    if test_ds is not None:
        if spec.eval_subset is not None and spec.eval_subset < len(test_ds):
            rng = np.random.default_rng(_derive_seed(spec.seed, 101))
            per_class = spec.eval_subset // test_ds.class_count
            picks = [rng.choice(idx, size=min(per_class, idx.size), replace=False)
                     for idx in test_ds.class_indices() if idx.size]
            eval_idx = np.sort(np.concatenate(picks))
        else:
            eval_idx = np.arange(len(test_ds))

    for epoch in range(spec.epochs):
        lr = lr_at(spec, epoch)
        perm = np.random.default_rng(_derive_seed(spec.seed, 202, epoch)).permutation(n)
        total_loss = 0.0
        for b_idx, lo in enumerate(range(0, n, spec.batch_size)):
            batch_idx = perm[lo:lo + spec.batch_size]
            images = train_ds.images[batch_idx]
            labels = train_ds.labels[batch_idx]
            inner = spec.inner_attack
            if inner is not None:
                inner = replace(inner, seed=_derive_seed(spec.seed, 303, epoch, b_idx))
            loss = _batch_loss(model, spec, images, labels, batch_idx, inner)
            ad.zero_gradients(model.params.values())
            ad.backward(loss)
            for name, tensor in model.params.items():
                tensor.data, velocities[name] = sgd_step(
                    tensor.data, tensor.grad, velocities[name],
                    lr, spec.momentum, spec.weight_decay,
                )
            ad.zero_gradients(model.params.values())
            total_loss += float(loss.data) * len(batch_idx)

        model.epoch = epoch + 1
        if test_ds is not None:
            nat_acc, rob_total, rob_per_class = _eval_epoch(model, test_ds, eval_idx, spec)
        else:
            nat_acc, rob_total = float("nan"), float("nan")
            rob_per_class = [float("nan")] * train_ds.class_count
        log.records.append(EpochRecord(
            epoch=epoch, lr=lr, train_loss=total_loss / n,
            nat_acc=nat_acc, rob_acc_total=rob_total,
            rob_acc_per_class=rob_per_class,
        ))
    return model, log
