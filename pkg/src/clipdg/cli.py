"""Command-line entry point: ``clipdg <subcommand> --config FILE [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The dataset root in the config can be overridden with ``CLIPDG_DATA_ROOT``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from clipdg.core import DR_CLASS_NAMES, ConfigError, ExperimentConfig, apply_overrides, validate_config
from clipdg.data import DataError, write_domain, synth_domains
from clipdg.prompts import PromptError
from clipdg.protocol import (
    RunRecord,
    RunReport,
    aggregate_runs,
    build_estimator,
    class_count,
    column_maxima,
    evaluate_checkpoint,
    load_checkpoint,
    make_registry,
    render_table,
    run_multi_source,
    run_single_source,
    run_single_trial,
    save_checkpoint,
    write_json_atomic,
)

DATA_ROOT_ENV = "CLIPDG_DATA_ROOT"
log = logging.getLogger("clipdg")


class UsageError(Exception):
    """Bad invocation; reported with exit code 2."""


# ---------------------------------------------------------------- config loading

def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def load_raw_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"config {path} must hold a mapping")
    return raw


def resolve_config(args) -> tuple[ExperimentConfig, dict]:
    """Config file + flag overrides + env override, validated; also returns the raw document."""
    raw = load_raw_config(args.config)
    overrides = {
        "experiment.strategy": getattr(args, "strategy", None),
        "experiment.seeds": getattr(args, "seeds", None),
        "experiment.steps": getattr(args, "steps", None),
        "experiment.workers": getattr(args, "workers", None),
        "strategy.b": getattr(args, "b", None),
        "strategy.lr": getattr(args, "lr", None),
        "strategy.prompt_set": getattr(args, "prompt_family", None),
        "strategy.n_p": getattr(args, "np", None),
        "strategy.mlp_layers": getattr(args, "mlp_layers", None),
        "data.root": os.environ.get(DATA_ROOT_ENV) or None,
    }
    target = getattr(args, "target", None)
    if target is not None and args.command == "train":
        overrides["data.target"] = target
        if isinstance(raw.get("data"), dict):
            raw["data"].pop("sources", None)
    doc = apply_overrides(raw, overrides)
    if args.command == "zero-shot" and "strategy" not in (doc.get("experiment") or {}):
        doc = apply_overrides(doc, {"experiment.strategy": "zero_shot"})
    return validate_config(doc), doc


def _provenance(args, doc: dict) -> dict:
    return {"config_file": str(args.config), "resolved_document": doc, "argv": list(args.argv)}


def _prepare_out(out: Path, markers: list[str], overwrite: bool) -> None:
    existing = [m for m in markers if (out / m).exists()]
    if existing and not overwrite:
        raise UsageError(f"{out} already holds results ({', '.join(existing)}); pass --overwrite to replace them")
    for m in existing:
        p = out / m
        shutil.rmtree(p) if p.is_dir() else p.unlink()
    out.mkdir(parents=True, exist_ok=True)


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


# ---------------------------------------------------------------- reports

def _run_filename(rec: RunRecord) -> str:
    if rec.mode == "single_source":
        return f"{rec.strategy}__{rec.sources[0]}__{rec.target}__seed{rec.seed}.json"
    return f"{rec.strategy}__{rec.target}__seed{rec.seed}.json"


def read_runs(runs_dir: Path) -> list[RunRecord]:
    files = sorted(runs_dir.rglob("*.json")) if runs_dir.is_dir() else []
    records = []
    for f in files:
        d = json.loads(f.read_text())
        if isinstance(d, dict) and {"target", "seed", "metrics", "config_hash"} <= d.keys():
            records.append(RunRecord.from_dict(d))
    return records


def write_report_files(out: Path, rows: dict, domains: list[str], extra: dict) -> None:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(render_table(rows, domains))
    _write_text_atomic(out / "report.csv", buf.getvalue())
    meta = {"metric": "macro_f1", "scale": 100, "cell_format": "mean (std)",
            "bold": column_maxima(rows, domains), **extra}
    write_json_atomic(out / "report.meta.json", meta)


def _report_domains(records: list[RunRecord], preferred: list[str] | None = None) -> list[str]:
    seen = {r.target for r in records}
    order = [d for d in (preferred or []) if d in seen]
    return order + sorted(seen - set(order))


# ---------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    config, doc = resolve_config(args)
    out = Path(args.out)
    _prepare_out(out, ["train.json", "checkpoints"], args.overwrite)
    registry = make_registry(config)
    results = []
    for seed in config.trial_seeds:
        trial = run_single_trial(config, seed, registry)
        ckpt = save_checkpoint(out / "checkpoints" / f"seed{seed}.pt", trial.model, config, trial.selected_step)
        results.append({"seed": seed, "selected_step": trial.selected_step, "checkpoint": str(ckpt),
                        "val_history": [vars(h) for h in trial.history]})
        log.info("seed %d: selected step %d", seed, trial.selected_step)
    write_json_atomic(out / "train.json", {
        "config_hash": config.config_hash(), "strategy": config.strategy,
        "sources": list(config.source_domains), "target": config.target_domain,
        "runs": results, "config": config.to_dict(), "provenance": _provenance(args, doc)})
    return 0


def cmd_eval(args) -> int:
    model, config = load_checkpoint(args.checkpoint)
    domains = [args.target] if args.target else list(config.domains)
    registry = make_registry(config)
    view = registry.view("test")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {d: evaluate_checkpoint(model, view.get(d), config.normalize).metrics for d in domains}
    write_json_atomic(out / "eval.json", {"checkpoint": str(args.checkpoint), "config_hash": config.config_hash(),
                                          "strategy": config.strategy, "metrics": metrics})
    for d, m in metrics.items():
        print(f"{d}: accuracy {m['accuracy']:.4f} macro_f1 {m['macro_f1']:.4f}")
    return 0


def cmd_zero_shot(args) -> int:
    config, doc = resolve_config(args)
    families = args.families.split(",") if args.families else [config.prompt_set]
    for fam in families:
        if fam not in ("I", "II", "custom"):
            raise UsageError(f"unknown prompt family {fam!r}; choose from I, II, custom")
    out = Path(args.out)
    _prepare_out(out, ["zero_shot.json"], args.overwrite)
    registry = make_registry(config)
    K = class_count(config, registry)
    view = registry.view("test")
    domains = [args.target] if args.target else list(config.domains)
    blocks = {}
    for fam in families:
        cfg = replace(config, strategy="zero_shot", prompt_set=fam)
        if fam != "custom" and cfg.class_names is None:
            # Families I/II carry their own grading vocabulary.
            cfg = replace(cfg, class_names=DR_CLASS_NAMES)
        model = build_estimator(cfg, K, config.trial_seeds[0])
        sample = view.get(domains[0])
        model.initialize(n_classes=K, image_shape=(sample.images.shape[1], cfg.normalize.side, cfg.normalize.side))
        blocks[fam] = {d: evaluate_checkpoint(model, view.get(d), cfg.normalize).metrics for d in domains}
        for d in domains:
            print(f"prompt {fam} {d}: macro_f1 {blocks[fam][d]['macro_f1']:.4f}")
    write_json_atomic(out / "zero_shot.json", {"config_hash": config.config_hash(), "families": blocks,
                                               "provenance": _provenance(args, doc)})
    return 0


def _cmd_matrix(args, mode: str) -> int:
    config, doc = resolve_config(args)
    out = Path(args.out)
    _prepare_out(out, ["runs", "report.json", "report.csv", "report.meta.json"], args.overwrite)
    runs_dir = out / "runs"

    def persist(rec: RunRecord, _trial) -> None:
        write_json_atomic(runs_dir / _run_filename(rec), rec.to_dict())
        log.info("%s target %s seed %d: macro_f1 %.4f", rec.strategy, rec.target, rec.seed, rec.metrics["macro_f1"])

    if mode == "multi_source":
        targets = [args.target] if args.target else None
        report: RunReport = run_multi_source(config, targets=targets, on_run=persist)
    else:
        report = run_single_source(config, on_run=persist)
    doc_out = report.to_dict()
    doc_out["provenance"] = _provenance(args, doc)
    write_json_atomic(out / "report.json", doc_out)
    write_report_files(out, report.rows, report.domains, {"config_hash": report.config_hash,
                                                          "provenance": _provenance(args, doc)})
    for line in report.table():
        print(",".join(line))
    return 0


def cmd_multi_source(args) -> int:
    return _cmd_matrix(args, "multi_source")


def cmd_single_source(args) -> int:
    return _cmd_matrix(args, "single_source")


def cmd_report(args) -> int:
    runs_dir = Path(args.runs)
    records = read_runs(runs_dir)
    if not records:
        raise RuntimeError(f"no runs found under {runs_dir}")
    rows = aggregate_runs(records)
    out = Path(args.out) if args.out else (runs_dir.parent if runs_dir.name == "runs" else runs_dir)
    out.mkdir(parents=True, exist_ok=True)
    domains = _report_domains(records)
    write_report_files(out, rows, domains, {"config_hashes": sorted({r.config_hash for r in records}),
                                            "n_runs": len(records)})
    for line in render_table(rows, domains):
        print(",".join(line))
    return 0


def cmd_synth_data(args) -> int:
    config, _ = resolve_config(args)
    if config.synth is None:
        raise UsageError("synth-data needs a data.synth section in the config")
    out = Path(args.out)
    _prepare_out(out, list(config.synth.names), args.overwrite)
    for ds in synth_domains(config.synth, seed=config.synth_seed):
        write_domain(ds, out)
        print(f"wrote {out / ds.name} ({len(ds)} samples)")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "zero-shot": cmd_zero_shot,
    "multi-source": cmd_multi_source,
    "single-source": cmd_single_source,
    "report": cmd_report,
    "synth-data": cmd_synth_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clipdg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(p: argparse.ArgumentParser, config_required: bool = True):
        p.add_argument("--config", required=config_required, help="YAML or JSON experiment config")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--strategy", choices=("erm", "linear_probe", "zero_shot", "naive_mm", "cooplvt"))
        p.add_argument("--target", help="held-out domain")
        p.add_argument("--seeds", type=_seeds, help="comma-separated trial seeds")
        p.add_argument("--steps", type=int)
        p.add_argument("--b", type=int, help="samples per source domain per step")
        p.add_argument("--lr", type=float)
        p.add_argument("--prompt-family", choices=("I", "II", "custom"))
        p.add_argument("--np", type=int, help="number of injected tokens")
        p.add_argument("--mlp-layers", type=int)
        p.add_argument("--overwrite", action="store_true")
        p.add_argument("--workers", type=int)

    for name in ("train", "multi-source", "single-source", "synth-data"):
        experiment(sub.add_parser(name))
    zs = sub.add_parser("zero-shot")
    experiment(zs)
    zs.add_argument("--families", help="comma-separated prompt families, e.g. I,II")
    ev = sub.add_parser("eval")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--target", help="domain to evaluate (default: every configured domain)")
    ev.add_argument("--out", default="runs")
    rp = sub.add_parser("report")
    rp.add_argument("runs", help="directory holding per-run JSON files")
    rp.add_argument("--out", help="where to write report.csv (default: next to the runs)")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, PromptError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
