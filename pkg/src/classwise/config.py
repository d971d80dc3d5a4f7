"""Experiment configuration: one JSON document drives every subcommand.

The document is validated strictly (unknown keys are rejected) and errors
carry the dotted path of the offending key.  `--set a.b.c=value` overrides
are applied to the raw document before validation, so the full config is
always re-checked.  Parsing never mutates or drops keys; serializing a parsed
config reproduces the original key set and values.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .attacks import AttackSpec
from .datasets import (
    BackgroundPlan,
    LabeledDataset,
    default_background_plan,
    generate_synthetic,
    load_mnist_idx,
    stratified_subset,
)
from .models import ArchitectureSpec
from .training import OBJECTIVES, TrainSpec

DATA_ROOT_ENV = "CLASSWISE_DATA_ROOT"


class ConfigError(ValueError):
    def __init__(self, key_path: str, message: str):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}")


def load_config(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found")
    except json.JSONDecodeError as e:
        raise ConfigError(str(path), f"invalid JSON ({e})")


def apply_overrides(raw: dict, assignments: list[str]) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON with a
    plain-string fallback."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        path, _, value = item.partition("=")
        keys = path.split(".")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(path, "override path crosses a non-object value")
        node[keys[-1]] = parsed
    return raw


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _require(d: dict, key: str, path: str):
    if key not in d:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required key")
    return d[key]


def _check_keys(d: dict, allowed: set[str], path: str):
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")


def _int(d, key, path, default=None):
    if key not in d:
        if default is None:
            raise ConfigError(f"{path}.{key}", "missing required key")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}.{key}", "expected an integer")
    return v


def _num(d, key, path, default=None):
    if key not in d:
        if default is None:
            raise ConfigError(f"{path}.{key}", "missing required key")
        return default
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}", "expected a number")
    return float(v)


def _str(d, key, path, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"{path}.{key}", "missing required key")
        return default
    if not isinstance(d[key], str):
        raise ConfigError(f"{path}.{key}", "expected a string")
    return d[key]


_DATASET_KEYS = {
    "source", "root", "train_images", "train_labels", "test_images", "test_labels",
    "train_subset", "subset_seed", "classes", "per_class_train", "per_class_test",
    "dimension", "noise", "seed", "background",
}
_BACKGROUND_KEYS = {"tau_fg", "train_plan", "test_plan"}
_MODEL_KEYS = {"architecture", "seed", "hidden", "conv_channels", "kernel", "fc_width"}
_TRAIN_KEYS = {
    "objective", "epochs", "batch_size", "lr", "milestones", "lr_decay", "momentum",
    "weight_decay", "beta", "inner_attack", "eval_attack", "eval_subset", "seed",
}
_ATTACK_KEYS = {"family", "epsilon", "alpha", "steps", "random_start",
                "inv_temperature", "seed"}
_EXPERIMENT_KEYS = {
    "checkpoint", "substitute_checkpoint", "attacks", "attack", "grid_attack",
    "grid", "confound_classes", "top_cells", "target_class", "batch_size",
}
_TOP_KEYS = {"dataset", "model", "train", "attacks", "experiment", "output"}


def validate_config(raw: dict) -> None:
    _check_keys(raw, _TOP_KEYS, "")
    ds = _require(raw, "dataset", "")
    _check_keys(ds, _DATASET_KEYS, "dataset")
    source = _str(ds, "source", "dataset", required=True)
    if source not in ("synthetic", "idx"):
        raise ConfigError("dataset.source", f"must be 'synthetic' or 'idx', got {source!r}")
    if source == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            _str(ds, key, "dataset", required=True)
    else:
        for key in ("classes", "per_class_train", "per_class_test", "dimension"):
            _int(ds, key, "dataset")
    if "background" in ds:
        bg = ds["background"]
        _check_keys(bg, _BACKGROUND_KEYS, "dataset.background")
        for plan_key in ("train_plan", "test_plan"):
            plan = bg.get(plan_key, "default")
            if plan == "default":
                continue
            if not isinstance(plan, dict):
                raise ConfigError(f"dataset.background.{plan_key}",
                                  "expected 'default' or a class->color object")
            for cls, color in plan.items():
                if not cls.isdigit() or not isinstance(color, list) or len(color) != 3:
                    raise ConfigError(f"dataset.background.{plan_key}.{cls}",
                                      "expected \"<class id>\": [r, g, b]")

    model = _require(raw, "model", "")
    _check_keys(model, _MODEL_KEYS, "model")
    arch = _str(model, "architecture", "model", required=True)
    if arch not in ("linear", "mlp", "cnn4"):
        raise ConfigError("model.architecture", f"unknown architecture {arch!r}")

    attacks = raw.get("attacks", {})
    _check_keys(attacks, set(attacks), "attacks")
    for name, spec in attacks.items():
        _check_keys(spec, _ATTACK_KEYS, f"attacks.{name}")
        _str(spec, "family", f"attacks.{name}", required=True)
        _num(spec, "epsilon", f"attacks.{name}")
        _num(spec, "alpha", f"attacks.{name}")
        try:
            AttackSpec.from_config(spec)
        except ValueError as e:
            raise ConfigError(f"attacks.{name}", str(e))

    if "train" in raw:
        tr = raw["train"]
        _check_keys(tr, _TRAIN_KEYS, "train")
        objective = _str(tr, "objective", "train", required=True)
        if objective not in OBJECTIVES:
            raise ConfigError("train.objective", f"unknown objective {objective!r}")
        _int(tr, "epochs", "train")
        _int(tr, "batch_size", "train")
        _num(tr, "lr", "train")
        for key in ("inner_attack", "eval_attack"):
            name = _str(tr, key, "train")
            if name is not None and name not in attacks:
                raise ConfigError(f"train.{key}", f"references unknown attack {name!r}")

    if "experiment" in raw:
        exp = raw["experiment"]
        _check_keys(exp, _EXPERIMENT_KEYS, "experiment")
        for key in ("attack", "grid_attack"):
            name = _str(exp, key, "experiment")
            if name is not None and name not in attacks:
                raise ConfigError(f"experiment.{key}", f"references unknown attack {name!r}")
        if "attacks" in exp:
            if not isinstance(exp["attacks"], list):
                raise ConfigError("experiment.attacks", "expected a list of attack names")
            for name in exp["attacks"]:
                if name not in attacks:
                    raise ConfigError("experiment.attacks", f"references unknown attack {name!r}")

    _str(raw, "output", "", required=True)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _data_path(ds_cfg: dict, key: str) -> Path:
    p = Path(ds_cfg[key])
    if p.is_absolute():
        return p
    root = ds_cfg.get("root") or os.environ.get(DATA_ROOT_ENV, "")
    return Path(root) / p if root else p


def build_datasets(raw: dict) -> tuple[LabeledDataset, LabeledDataset]:
    ds = raw["dataset"]
    if ds["source"] == "idx":
        train = load_mnist_idx(_data_path(ds, "train_images"),
                               _data_path(ds, "train_labels"), split="train")
        test = load_mnist_idx(_data_path(ds, "test_images"),
                              _data_path(ds, "test_labels"), split="test")
    else:
        train = generate_synthetic(ds["classes"], ds["per_class_train"],
                                   ds["dimension"], seed=ds.get("seed", 0),
                                   noise=ds.get("noise", 0.08), split="train")
        test = generate_synthetic(ds["classes"], ds["per_class_test"],
                                  ds["dimension"], seed=ds.get("seed", 0) + 1,
                                  noise=ds.get("noise", 0.08), split="test")
    subset = ds.get("train_subset")
    if subset is not None and subset < len(train):
        train = stratified_subset(train, subset, seed=ds.get("subset_seed", 0))
    return train, test


def build_architecture(raw: dict, ds: LabeledDataset) -> ArchitectureSpec:
    m = raw["model"]
    return ArchitectureSpec(
        name=m["architecture"],
        input_shape=ds.image_shape,
        class_count=ds.class_count,
        hidden=m.get("hidden", 100),
        conv_channels=tuple(m.get("conv_channels", (16, 32))),
        kernel=m.get("kernel", 5),
        fc_width=m.get("fc_width", 100),
    )


def attack_by_name(raw: dict, name: str) -> AttackSpec:
    try:
        return AttackSpec.from_config(raw["attacks"][name])
    except KeyError:
        raise ConfigError(f"attacks.{name}", "attack is not defined")


def build_train_spec(raw: dict) -> TrainSpec:
    tr = raw["train"]
    beta = tr.get("beta")
    if isinstance(beta, list):
        beta = tuple(float(b) for b in beta)
    inner = attack_by_name(raw, tr["inner_attack"]) if tr.get("inner_attack") else None
    evaluator = attack_by_name(raw, tr["eval_attack"]) if tr.get("eval_attack") else None
    return TrainSpec(
        objective=tr["objective"],
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        lr=tr["lr"],
        milestones=tuple(tr.get("milestones", ())),
        lr_decay=tr.get("lr_decay", 10.0),
        momentum=tr.get("momentum", 0.9),
        weight_decay=tr.get("weight_decay", 2e-4),
        beta=beta,
        inner_attack=inner,
        eval_attack=evaluator,
        eval_subset=tr.get("eval_subset"),
        seed=tr.get("seed", 0),
    )


def build_background_plans(raw: dict, class_count: int) -> tuple[BackgroundPlan, BackgroundPlan]:
    bg = raw["dataset"].get("background", {})
    tau = bg.get("tau_fg", 0.1)

    def _plan(key: str) -> BackgroundPlan:
        plan = bg.get(key, "default")
        if plan == "default":
            return default_background_plan(class_count, tau_fg=tau)
        colors = {int(cls): tuple(color) for cls, color in plan.items()}
        return BackgroundPlan(colors=colors, tau_fg=tau)

    return _plan("train_plan"), _plan("test_plan")
