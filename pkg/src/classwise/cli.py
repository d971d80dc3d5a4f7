"""Command-line entry point.

Subcommands: train, attack, homing, background, inference-adjust, report.
Every run is driven by one JSON config (``--config``), optionally overridden
with ``--set key.path=value`` flags; artifacts land in the config's output
directory (overridable with ``--out``).  Exit codes: 0 success, 1 runtime
failure, 2 invalid usage or config.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, background
from .attacks import run_attack
from .config import (
    ConfigError,
    apply_overrides,
    attack_by_name,
    build_architecture,
    build_background_plans,
    build_datasets,
    build_train_spec,
    load_config,
    validate_config,
)
from .fileio import write_csv, write_json
from .models import init_model, load_checkpoint, save_checkpoint
from .training import train


def _load(args) -> tuple[dict, Path]:
    raw = load_config(args.config)
    apply_overrides(raw, args.set or [])
    validate_config(raw)
    out = Path(args.out) if args.out else Path(raw["output"])
    out.mkdir(parents=True, exist_ok=True)
    return raw, out


def _resolved_config(raw: dict, out: Path) -> None:
    write_json(out / "config.json", raw)


def cmd_train(args) -> int:
    raw, out = _load(args)
    if "train" not in raw:
        raise ConfigError("train", "missing required key")
    train_ds, test_ds = build_datasets(raw)
    arch = build_architecture(raw, train_ds)
    spec = build_train_spec(raw)
    model = init_model(arch, raw["model"].get("seed", 0))
    model, log = train(model, train_ds, spec, test_ds)
    save_checkpoint(model, out / "model.ckpt")
    log.to_csv(out / "train_log.csv")
    _resolved_config(raw, out)
    print(f"trained {spec.objective} model for {spec.epochs} epochs -> {out / 'model.ckpt'}")
    return 0


def _report_metadata(raw: dict) -> dict:
    meta = {}
    if "train" in raw:
        meta["defense"] = raw["train"]["objective"]
    return meta


def _write_report(report, out: Path, name: str) -> None:
    report.write(out / f"report_{name}.json")
    report.natural_confusion.to_csv(out / f"confusion_natural_{name}.csv")
    report.adversarial_confusion.to_csv(out / f"confusion_adversarial_{name}.csv")


def cmd_attack(args) -> int:
    raw, out = _load(args)
    exp = raw.get("experiment", {})
    if "checkpoint" not in exp:
        raise ConfigError("experiment.checkpoint", "missing required key")
    model = load_checkpoint(exp["checkpoint"])
    _, test_ds = build_datasets(raw)
    substitute = None
    if exp.get("substitute_checkpoint"):
        substitute = load_checkpoint(exp["substitute_checkpoint"])
    batch_size = exp.get("batch_size", 256)
    meta = _report_metadata(raw)

    names = exp.get("attacks", [])
    for name in names:
        spec = attack_by_name(raw, name)
        report = analysis.build_report(model, test_ds, spec, substitute=substitute,
                                       batch_size=batch_size,
                                       metadata={**meta, "attack_name": name})
        _write_report(report, out, name)
        print(f"{name}: robust accuracy {report.robust_total:.4f}")

    if exp.get("grid_attack"):
        base = attack_by_name(raw, exp["grid_attack"])
        grid = exp.get("grid", [1, 2, 5, 10, 50])
        rows = []
        best = None
        for invt in grid:
            spec = replace(base, inv_temperature=float(invt),
                           family="pgd" if float(invt) == 1.0 else "tpgd")
            label = f"{exp['grid_attack']}_invt_{invt:g}"
            report = analysis.build_report(model, test_ds, spec, batch_size=batch_size,
                                           metadata={**meta, "attack_name": label})
            _write_report(report, out, label)
            rows.append([f"{invt:g}", f"{report.robust_total:.6f}",
                         f"{report.mcd_robust:.6f}"])
            if best is None or report.robust_total < best[1].robust_total:
                best = (invt, report)
            print(f"1/T={invt:g}: robust accuracy {report.robust_total:.4f}")
        rows.append([f"best={best[0]:g}", f"{best[1].robust_total:.6f}",
                     f"{best[1].mcd_robust:.6f}"])
        write_csv(out / "grid_summary.csv",
                  ["inv_temperature", "rob_acc_total", "mcd"], rows)
    _resolved_config(raw, out)
    return 0


def cmd_homing(args) -> int:
    raw, out = _load(args)
    exp = raw.get("experiment", {})
    if "attack" not in exp:
        raise ConfigError("experiment.attack", "missing required key")
    train_ds, test_ds = build_datasets(raw)
    arch = build_architecture(raw, train_ds)
    spec = build_train_spec(raw)
    attack = attack_by_name(raw, exp["attack"])
    baseline = load_checkpoint(exp["checkpoint"]) if exp.get("checkpoint") else None
    confound = exp.get("confound_classes")
    if confound is None and exp.get("top_cells"):
        if baseline is None:
            baseline, _ = train(init_model(arch, spec.seed), train_ds, spec)
        probe = run_attack(baseline, test_ds.images, test_ds.labels, attack,
                           batch_size=exp.get("batch_size", 256))
        m, _ = analysis.misclassified_matrix(probe, test_ds.labels, test_ds.class_count)
        flat = np.argsort(m, axis=None)[::-1][: exp["top_cells"]]
        confound = sorted({int(f % test_ds.class_count) for f in flat})
    result = analysis.homing_experiment(arch, train_ds, test_ds, attack, spec,
                                        confound_classes=confound, baseline=baseline,
                                        batch_size=exp.get("batch_size", 256))
    analysis.write_count_matrix(out / "misclassified.csv", result.misclassified)
    analysis.write_count_matrix(out / "homing.csv", result.homing)
    write_json(out / "homing_cells.json", {
        f"{i},{j}": ids for (i, j), ids in sorted(result.cell_ids.items())
    })
    i, j = result.top_cell()
    write_json(out / "homing_summary.json", {
        "top_cell": [i, j],
        "misclassified": int(result.misclassified[i, j]),
        "homing": int(result.homing[i, j]),
    })
    _resolved_config(raw, out)
    print(f"top cell ({i}, {j}): {result.homing[i, j]}/{result.misclassified[i, j]} homed")
    return 0


def cmd_background(args) -> int:
    raw, out = _load(args)
    exp = raw.get("experiment", {})
    if "attack" not in exp:
        raise ConfigError("experiment.attack", "missing required key")
    gray_train, gray_test = build_datasets(raw)
    train_plan, test_plan = build_background_plans(raw, gray_train.class_count)
    spec = build_train_spec(raw)
    attack = attack_by_name(raw, exp["attack"])
    arch = build_architecture(raw, gray_train)
    arch = replace(arch, input_shape=(3,) + arch.input_shape[1:])
    result = background.run_background_study(
        gray_train, gray_test, train_plan, test_plan, arch, spec, attack,
        batch_size=exp.get("batch_size", 256),
    )
    save_checkpoint(result.model, out / "background_model.ckpt")
    result.natural_confusion.to_csv(out / "confusion_natural_background.csv")
    result.adversarial_confusion.to_csv(out / "confusion_adversarial_background.csv")
    write_json(out / "background_summary.json", result.summary_dict())
    _resolved_config(raw, out)
    print(
        f"within-group flip mass: natural {result.within_group_natural:.3f}, "
        f"adversarial {result.within_group_adversarial:.3f}, "
        f"uniform baseline {result.expected_random_mass:.3f}"
    )
    return 0


def cmd_inference_adjust(args) -> int:
    raw, out = _load(args)
    exp = raw.get("experiment", {})
    for key in ("checkpoint", "attack"):
        if key not in exp:
            raise ConfigError(f"experiment.{key}", "missing required key")
    model = load_checkpoint(exp["checkpoint"])
    _, gray_test = build_datasets(raw)
    _, test_plan = build_background_plans(raw, gray_test.class_count)
    from .datasets import colorize_background
    test_ds = colorize_background(gray_test, test_plan) if model.spec.input_shape[0] == 3 else gray_test
    attack = attack_by_name(raw, exp["attack"])
    batch_size = exp.get("batch_size", 256)

    target = exp.get("target_class", "auto")
    if target == "auto":
        probe = run_attack(model, test_ds.images, test_ds.labels, attack,
                           batch_size=batch_size)
        per_class = probe.per_class_robust(test_ds.class_count)
        target = int(np.nanargmin(per_class))
    result = background.run_inference_adjust(model, test_ds, target, attack,
                                             tau_fg=test_plan.tau_fg,
                                             batch_size=batch_size)
    result.to_csv(out / "inference_adjust_natural.csv", "natural")
    result.to_csv(out / "inference_adjust_adversarial.csv", "adversarial")
    write_json(out / "inference_adjust_summary.json", result.summary_dict())
    _resolved_config(raw, out)
    print(
        f"class {target}: natural {result.format_delta('natural')}, "
        f"adversarial {result.format_delta('adversarial')}"
    )
    return 0


def cmd_report(args) -> int:
    import json

    directory = Path(args.out or (args.config and load_config(args.config).get("output")) or ".")
    report_files = sorted(directory.glob("report_*.json"))
    if not report_files:
        raise FileNotFoundError(f"report: no report_*.json files in {directory}")
    rows = []
    class_count = None
    for path in report_files:
        with open(path) as f:
            doc = json.load(f)
        class_count = doc["class_count"]
        per_class = doc["robust_accuracy"]["per_class"]
        stored_cv, stored_mcd = doc["cv"], doc["mcd"]
        acc = np.asarray([np.nan if v is None else v for v in per_class])
        recomputed_cv = analysis.classwise_variance(acc)
        recomputed_mcd = analysis.max_classwise_discrepancy(acc)
        if abs(recomputed_cv - stored_cv) > 1e-9 or abs(recomputed_mcd - stored_mcd) > 1e-9:
            raise ValueError(f"report: stored CV/MCD in {path.name} do not match the class vector")
        meta = doc.get("metadata", {})
        row = [
            meta.get("defense", "unknown"),
            meta.get("attack_name", meta.get("attack", {}).get("family", "unknown")),
            meta.get("model_checkpoint", ""),
            f"{100 * doc['robust_accuracy']['total']:.1f}",
        ]
        row += ["" if v is None else f"{100 * v:.1f}" for v in per_class]
        row += [f"{1e4 * stored_cv:.1f}", f"{100 * stored_mcd:.1f}"]
        rows.append(row)
    header = ["defense", "attack", "model", "tot"]
    header += [str(c) for c in range(class_count)]
    header += ["cv", "mcd"]
    write_csv(directory / "summary.csv", header, rows)
    print(f"wrote {directory / 'summary.csv'} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="classwise",
        description="Class-wise adversarial robustness experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "train": cmd_train,
        "attack": cmd_attack,
        "homing": cmd_homing,
        "background": cmd_background,
        "inference-adjust": cmd_inference_adjust,
        "report": cmd_report,
    }
    for name, fn in handlers.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="path to the JSON experiment config",
                       required=(name != "report"))
        p.add_argument("--out", help="output directory (default: config's output key)")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="override a config value (JSON-parsed)")
        p.set_defaults(handler=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as e:
        print(f"config error at {e.key_path}: {e.args[0].split(': ', 1)[-1]}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
