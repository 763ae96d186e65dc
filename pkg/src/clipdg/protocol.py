"""Leave-one-domain-out experiment runners.

A *trial* trains one strategy on a set of source domains with a fixed seed,
validating on the pooled source validation splits every ``eval_interval``
steps and keeping the snapshot with the best validation macro-F1. Held-out
domains are fenced off through :class:`~clipdg.data.DomainRegistry` views, so
any attempt to read them while training or selecting raises.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from clipdg.core import ExperimentConfig, validate_config
from clipdg.data import DataError, DomainDataset, DomainRegistry, split_train_val, synth_domains, make_dg_batches
from clipdg.metrics import compute_metrics, confusion_matrix
from clipdg.rng import derive_rng, derive_seed
from clipdg.strategies.estimators import STRATEGY_CLASSES, DGClassifier
from clipdg.transforms import NormalizeParams, preprocess_batch

CHECKPOINT_FORMAT = "clipdg-checkpoint/1"
REPORT_METRICS = ("accuracy", "macro_f1")


@dataclass(frozen=True)
class ConfusionMatrix:
    """``K x K`` counts, rows true class, columns prediction."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, preds, labels, n_classes: int) -> "ConfusionMatrix":
        return cls(confusion_matrix(preds, labels, n_classes))

    @property
    def total(self) -> int:
        return int(np.asarray(self.counts).sum())


@dataclass
class ValPoint:
    step: int
    accuracy: float
    macro_f1: float


@dataclass
class TrialResult:
    model: DGClassifier
    history: list[ValPoint]
    selected_index: int
    sources: tuple[str, ...]
    seed: int

    @property
    def selected_step(self) -> int:
        return self.history[self.selected_index].step


@dataclass
class EvalResult:
    predictions: np.ndarray
    metrics: dict


# ---------------------------------------------------------------- building blocks

def select_model(history: Sequence) -> int:
    """Index of the best validation macro-F1; the earliest wins ties."""
    if len(history) == 0:
        raise ValueError("cannot select from an empty validation history")
    scores = [h.macro_f1 if isinstance(h, ValPoint) else float(h) for h in history]
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def make_registry(config: ExperimentConfig, log=None) -> DomainRegistry:
    if config.synth is not None:
        datasets = synth_domains(config.synth, seed=config.synth_seed)
        return DomainRegistry.from_datasets([d for d in datasets if d.name in config.domains], log)
    K = config.n_classes
    if K is None:
        raise DataError("real-data configs must list data.class_names so the class count is known")
    return DomainRegistry.from_root(config.data_root, config.domains, K, log=log)


def class_count(config: ExperimentConfig, registry: DomainRegistry | None = None) -> int:
    """Task class count from the config; falls back to label inventories."""
    if config.n_classes is not None:
        return config.n_classes
    if registry is None:
        raise ValueError("class count is not fixed by the config and no registry was given")
    return max(max(registry.class_inventory(d)) for d in config.domains) + 1


def build_estimator(config: ExperimentConfig, n_classes: int, seed: int) -> DGClassifier:
    """Unfitted estimator for ``config.strategy`` with a trial seed."""
    cls = STRATEGY_CLASSES[config.strategy]
    text = {
        "class_names": list(config.class_names) if config.class_names else None,
        "prompt_family": config.prompt_set if config.class_names else "custom",
        "prompt_template": config.prompt_template,
        "prompt_file": config.prompt_file,
    }
    train = {"b": config.b, "steps": config.steps, "lr": config.lr,
             "weight_decay": config.weight_decay, "optimizer": config.optimizer}
    common = {"encoder": dict(config.encoder), "n_classes": n_classes, "random_state": seed}
    if config.strategy in ("erm", "linear_probe"):
        return cls(**common, **train)
    if config.strategy == "zero_shot":
        return cls(**common, **text)
    scale = {"logit_scale_init": config.logit_scale_init, "learn_logit_scale": config.learn_logit_scale}
    if config.strategy == "naive_mm":
        return cls(**common, **text, **train, **scale)
    return cls(**common, **text, **train, **scale, n_p=config.n_p, mlp_layers=config.mlp_layers,
               train_vision=config.train_vision, train_projector=config.train_projector)


def _image_shape(config: ExperimentConfig, sample: DomainDataset) -> tuple[int, int, int]:
    return (sample.images.shape[1], config.normalize.side, config.normalize.side)


def _evaluate(model: DGClassifier, images: np.ndarray, labels: np.ndarray) -> dict:
    return compute_metrics(model.predict(images), labels, model.n_classes_)


def evaluate_checkpoint(model: DGClassifier, domain: DomainDataset,
                        normalize: NormalizeParams | None = None) -> EvalResult:
    """Predict on every sample of ``domain`` with resize + normalize only."""
    images, labels = domain.all()
    if labels.max() >= model.n_classes_:
        raise ValueError(f"domain {domain.name!r} has label {int(labels.max())} but the "
                         f"checkpoint was trained for {model.n_classes_} classes")
    x = preprocess_batch(images, normalize or NormalizeParams())
    preds = model.predict(x)
    return EvalResult(preds, compute_metrics(preds, labels, model.n_classes_))


# ---------------------------------------------------------------- one trial

def run_single_trial(config: ExperimentConfig, trial_seed: int, registry: DomainRegistry,
                     sources: Sequence[str] | None = None) -> TrialResult:
    """Train on ``sources`` (default: the config's source domains) and select a snapshot.

    Every domain outside ``sources`` is fenced for the whole trial.
    """
    sources = tuple(sources if sources is not None else config.source_domains)
    if not sources:
        raise ValueError("a trial needs at least one source domain")
    fenced = [d for d in registry.names if d not in sources]
    K = class_count(config, registry)

    train_view = registry.view("train", fenced)
    select_view = registry.view("select", fenced)
    split_seed = derive_seed(trial_seed, "splitter")
    splits = [split_train_val(train_view.get(s), 1 - config.val_fraction, seed=split_seed) for s in sources]
    # Validation reads are logged under the selection phase.
    select_reader = select_view.get(sources[0])._reader
    val_parts = [sp.val.with_reader(select_reader) for sp in splits]
    val_x, val_y = [], []
    for p in val_parts:
        if len(p):
            x, y = p.all()
            val_x.append(x)
            val_y.append(y)
    if not val_x:
        raise DataError(f"source domains {list(sources)} have no validation samples")
    val_x = preprocess_batch(np.concatenate(val_x), config.normalize)
    val_y = np.concatenate(val_y)

    model = build_estimator(config, K, trial_seed)
    model.initialize(n_classes=K, image_shape=_image_shape(config, splits[0].train))

    history: list[ValPoint] = []
    best_state, best_score = None, -math.inf

    def record(step: int):
        nonlocal best_state, best_score
        m = _evaluate(model, val_x, val_y)
        history.append(ValPoint(step, m["accuracy"], m["macro_f1"]))
        if m["macro_f1"] > best_score:
            best_score, best_state = m["macro_f1"], model.state_dict()

    trainable = config.strategy != "zero_shot" and config.steps > 0 and model._trainable()
    if trainable:
        aug_rng = derive_rng(trial_seed, "augmenter")
        batches = make_dg_batches([sp.train for sp in splits], config.b,
                                  seed=derive_seed(trial_seed, "sampler"), n_batches=config.steps)
        for step, batch in enumerate(batches, start=1):
            x = preprocess_batch(batch.images, config.normalize, aug_rng, config.augment)
            model.train_step(x, batch.labels)
            if step % config.eval_interval == 0:
                record(step)
    if not history:
        record(model.step_)

    chosen = select_model(history)
    assert history[chosen].macro_f1 == best_score
    model.load_state_dict(best_state)
    return TrialResult(model, history, chosen, sources, trial_seed)


# ---------------------------------------------------------------- runs and aggregation

@dataclass
class RunRecord:
    """One trained model evaluated on one held-out domain."""

    mode: str
    strategy: str
    config_hash: str
    sources: list[str]
    target: str
    seed: int
    selected_step: int
    n_classes: int
    metrics: dict
    val_history: list[dict]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    if len(values) == 0:
        raise ValueError("no values to aggregate")
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=0))


def format_cell(values: Sequence[float], scale: float = 100.0) -> str:
    m, s = mean_std([v * scale for v in values])
    return f"{m:.1f} ({s:.1f})"


def _row_key(rec: RunRecord) -> str:
    return rec.strategy if rec.mode == "multi_source" else f"{rec.strategy}:{rec.sources[0]}"


def aggregate_runs(records: Sequence[RunRecord]) -> dict:
    """Per row (strategy, or strategy:source), per target: per-seed values, mean and std.

    The ``Avg`` column averages targets per seed first, then aggregates over seeds.
    """
    if not records:
        raise ValueError("no runs found")
    ks = {r.n_classes for r in records}
    if len(ks) > 1:
        raise ValueError(f"runs disagree on the number of classes: {sorted(ks)}")
    rows: dict[str, dict] = {}
    grouped: dict[str, dict[str, dict[int, RunRecord]]] = {}
    for r in records:
        grouped.setdefault(_row_key(r), {}).setdefault(r.target, {})[r.seed] = r
    for key, by_target in grouped.items():
        targets = sorted(by_target)
        row = {"mode": next(iter(next(iter(by_target.values())).values())).mode, "targets": {}, "avg": {}}
        seeds = sorted(set.intersection(*(set(v) for v in by_target.values())))
        for metric in REPORT_METRICS:
            for t in targets:
                vals = [by_target[t][s].metrics[metric] for s in sorted(by_target[t])]
                m, sd = mean_std(vals)
                row["targets"].setdefault(t, {})[metric] = {"values": vals, "mean": m, "std": sd}
            per_seed = [float(np.mean([by_target[t][s].metrics[metric] for t in targets])) for s in seeds]
            if per_seed:
                m, sd = mean_std(per_seed)
                row["avg"][metric] = {"values": per_seed, "mean": m, "std": sd}
        rows[key] = row
    return rows


@dataclass
class RunReport:
    mode: str
    strategy: str
    config: dict
    config_hash: str
    runs: list[RunRecord]
    rows: dict = field(default_factory=dict)
    domains: list[str] = field(default_factory=list)
    training_runs: int = 0

    def __post_init__(self):
        if not self.rows and self.runs:
            self.rows = aggregate_runs(self.runs)

    def cell(self, row: str, target: str, metric: str = "macro_f1") -> dict:
        return self.rows[row]["targets"][target][metric]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "strategy": self.strategy, "config": self.config,
                "config_hash": self.config_hash, "domains": self.domains,
                "training_runs": self.training_runs, "rows": self.rows,
                "runs": [r.to_dict() for r in self.runs]}

    def table(self, metric: str = "macro_f1") -> list[list[str]]:
        return render_table(self.rows, self.domains, metric)


def render_table(rows: dict, domains: Sequence[str], metric: str = "macro_f1") -> list[list[str]]:
    """Rows of strings: header, then one line per row key; cells are ``mean (std)`` x100."""
    single = any(r["mode"] == "single_source" for r in rows.values())
    header = (["strategy", "source"] if single else ["strategy"]) + list(domains) + ["Avg"]
    out = [header]
    for key, row in rows.items():
        strategy, _, source = key.partition(":")
        line = [strategy] + ([source] if single else [])
        for d in domains:
            c = row["targets"].get(d, {}).get(metric)
            line.append(format_cell(c["values"]) if c else "-")
        avg = row["avg"].get(metric)
        line.append(format_cell(avg["values"]) if avg else "-")
        out.append(line)
    return out


def column_maxima(rows: dict, domains: Sequence[str], metric: str = "macro_f1") -> dict[str, list[str]]:
    """Row keys holding the highest mean in each column (for bold marking)."""
    best: dict[str, list[str]] = {}
    for col in [*domains, "Avg"]:
        means = {}
        for key, row in rows.items():
            c = row["avg"].get(metric) if col == "Avg" else row["targets"].get(col, {}).get(metric)
            if c is not None:
                means[key] = round(c["mean"] * 100, 1)
        if means:
            top = max(means.values())
            best[col] = [k for k, v in means.items() if v == top]
    return best


def _history_dicts(trial: TrialResult) -> list[dict]:
    return [asdict(h) for h in trial.history]


def _run_pool(jobs: list[Callable[[], object]], workers: int) -> list:
    if workers <= 1:
        return [j() for j in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda j: j(), jobs))


def run_multi_source(config: ExperimentConfig, registry: DomainRegistry | None = None,
                     targets: Sequence[str] | None = None, workers: int | None = None,
                     on_run: Callable[[RunRecord, TrialResult], None] | None = None) -> RunReport:
    """Each configured domain in turn is the target; the rest are sources."""
    if len(config.domains) < 2:
        raise ValueError("multi-source runs need at least two domains")
    registry = registry or make_registry(config)
    K = class_count(config, registry)
    targets = list(targets or config.domains)

    def job(target: str, seed: int):
        cfg = config.with_roles([d for d in config.domains if d != target], target)
        trial = run_single_trial(cfg, seed, registry)
        test_view = registry.view("test", forbidden=[])
        res = evaluate_checkpoint(trial.model, test_view.get(target), config.normalize)
        rec = RunRecord("multi_source", config.strategy, config.config_hash(), list(cfg.source_domains),
                        target, seed, trial.selected_step, K, res.metrics, _history_dicts(trial))
        if on_run:
            on_run(rec, trial)
        return rec

    jobs = [lambda t=t, s=s: job(t, s) for t in targets for s in config.trial_seeds]
    records = _run_pool(jobs, workers or config.workers)
    return RunReport("multi_source", config.strategy, config.to_dict(), config.config_hash(),
                     records, domains=targets, training_runs=len(jobs))


def run_single_source(config: ExperimentConfig, registry: DomainRegistry | None = None,
                      sources: Sequence[str] | None = None, workers: int | None = None,
                      on_run: Callable[[RunRecord, TrialResult], None] | None = None) -> RunReport:
    """Each configured domain in turn is the only source; every other domain is a target."""
    if len(config.domains) < 2:
        raise ValueError("single-source runs need at least two domains")
    registry = registry or make_registry(config)
    K = class_count(config, registry)

    def job(source: str, seed: int):
        cfg = config.with_roles([source], None)
        trial = run_single_trial(cfg, seed, registry)
        test_view = registry.view("test", forbidden=[])
        out = []
        for target in config.domains:
            if target == source:
                continue
            res = evaluate_checkpoint(trial.model, test_view.get(target), config.normalize)
            rec = RunRecord("single_source", config.strategy, config.config_hash(), [source], target,
                            seed, trial.selected_step, K, res.metrics, _history_dicts(trial))
            if on_run:
                on_run(rec, trial)
            out.append(rec)
        return out

    sources = list(sources or config.domains)
    jobs = [lambda d=d, s=s: job(d, s) for d in sources for s in config.trial_seeds]
    records = [r for batch in _run_pool(jobs, workers or config.workers) for r in batch]
    return RunReport("single_source", config.strategy, config.to_dict(), config.config_hash(),
                     records, domains=list(config.domains), training_runs=len(jobs))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: DGClassifier, config: ExperimentConfig, step: int | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "n_classes": model.n_classes_,
        "random_state": int(model.random_state),
        "step": model.step_ if step is None else step,
        "params": model.state_dict(),
        "optimizer": model.optimizer_state(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[DGClassifier, ExperimentConfig]:
    """Rebuild the estimator a checkpoint came from and load its weights."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint written by this package")
    config = validate_config(payload["config"])
    model = build_estimator(config, payload["n_classes"], payload["random_state"])
    side = config.normalize.side
    channels = config.synth.channels if config.synth is not None else 3
    model.initialize(n_classes=payload["n_classes"], image_shape=(channels, side, side))
    model.load_state_dict(payload["params"])
    if model.optimizer_ is not None and payload["optimizer"]:
        model.optimizer_.load_state_dict(payload["optimizer"])
    model.step_ = payload["step"]
    return model, config


def write_json_atomic(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
    tmp.replace(path)
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")
