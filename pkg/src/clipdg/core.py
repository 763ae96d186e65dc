"""Shared types, the experiment config schema and the batch-size law."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Mapping, Sequence

from clipdg.data import DataError, SynthSpec
from clipdg.prompts import DEFAULT_TEMPLATE
from clipdg.rng import RngState, derive_rng, derive_seed
from clipdg.transforms import CLIP_MEAN, CLIP_STD, AugmentParams, NormalizeParams

__all__ = [
    "DR_CLASS_NAMES", "STRATEGIES", "ClassLabel", "ConfigError", "ExperimentConfig",
    "RngState", "derive_rng", "derive_seed", "total_batch_size", "validate_config",
    "apply_overrides",
]

DR_CLASS_NAMES = ("No DR", "mild DR", "moderate DR", "severe DR", "proliferative DR")
STRATEGIES = ("erm", "linear_probe", "zero_shot", "naive_mm", "cooplvt")
PROMPT_FAMILIES = ("I", "II", "custom")
OPTIMIZERS = ("adamw", "adam", "sgd")
DEFAULT_SEEDS = (0, 1, 2)
CLIP_LOGIT_SCALE = 1 / 0.07


@dataclass(frozen=True)
class ClassLabel:
    index: int
    name: str

    def __post_init__(self):
        if self.index < 0:
            raise ValueError(f"class index must be >= 0, got {self.index}")


def class_labels(names: Sequence[str]) -> tuple[ClassLabel, ...]:
    if len(set(names)) != len(names):
        raise ValueError(f"class names must be unique: {list(names)}")
    return tuple(ClassLabel(i, n) for i, n in enumerate(names))


def total_batch_size(b: int, d_tr: int) -> int:
    """Samples per optimization step when drawing ``b`` from each of ``d_tr`` domains."""
    for name, v in (("b", b), ("d_tr", d_tr)):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ValueError(f"{name} must be an integer, got {v!r}")
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    return b * d_tr


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` holds (field path, message) pairs."""

    def __init__(self, problems: Sequence[tuple[str, str]]):
        self.problems = list(problems)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.problems))


@dataclass(frozen=True)
class ExperimentConfig:
    strategy: str
    domains: tuple[str, ...]
    source_domains: tuple[str, ...]
    target_domain: str | None
    encoder: Mapping[str, Any]
    name: str = "experiment"
    b: int = 32
    lr: float = 5e-6
    weight_decay: float = 0.0
    optimizer: str = "adamw"
    steps: int = 5000
    eval_interval: int = 100
    val_fraction: float = 0.2
    trial_seeds: tuple[int, ...] = DEFAULT_SEEDS
    prompt_set: str = "I"
    prompt_template: str = DEFAULT_TEMPLATE
    prompt_file: str | None = None
    class_names: tuple[str, ...] | None = None
    n_p: int = 4
    mlp_layers: int = 2
    logit_scale_init: float = CLIP_LOGIT_SCALE
    learn_logit_scale: bool = True
    train_vision: bool = True
    train_projector: bool = True
    data_root: str | None = None
    synth: SynthSpec | None = None
    synth_seed: int = 0
    normalize: NormalizeParams = field(default_factory=NormalizeParams)
    augment: AugmentParams = field(default_factory=AugmentParams)
    output_dir: str = "runs"
    overwrite: bool = False
    workers: int = 1

    def to_dict(self) -> dict:
        """Nested document that :func:`validate_config` maps back to ``self``."""
        return {
            "experiment": {
                "name": self.name, "strategy": self.strategy, "seeds": list(self.trial_seeds),
                "steps": self.steps, "eval_interval": self.eval_interval, "workers": self.workers,
            },
            "data": {
                "root": self.data_root,
                "synth": None if self.synth is None else {**self.synth.to_dict(), "seed": self.synth_seed},
                "domains": list(self.domains),
                "sources": list(self.source_domains),
                "target": self.target_domain,
                "val_fraction": self.val_fraction,
                "image_side": self.normalize.side,
                "mean": list(self.normalize.mean),
                "std": list(self.normalize.std),
                "augment": self.augment.to_dict(),
                "class_names": None if self.class_names is None else list(self.class_names),
            },
            "encoder": _plain(self.encoder),
            "strategy": {
                "b": self.b, "lr": self.lr, "weight_decay": self.weight_decay,
                "optimizer": self.optimizer, "prompt_set": self.prompt_set,
                "prompt_template": self.prompt_template, "prompt_file": self.prompt_file,
                "n_p": self.n_p, "mlp_layers": self.mlp_layers,
                "logit_scale_init": self.logit_scale_init,
                "learn_logit_scale": self.learn_logit_scale,
                "train_vision": self.train_vision, "train_projector": self.train_projector,
            },
            "output": {"dir": self.output_dir, "overwrite": self.overwrite},
        }

    def config_hash(self) -> str:
        snap = self.to_dict()
        snap.pop("output")
        snap["experiment"].pop("workers")
        blob = json.dumps(snap, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_roles(self, sources: Sequence[str], target: str | None) -> "ExperimentConfig":
        return replace(self, source_domains=tuple(sources), target_domain=target)

    @property
    def n_classes(self) -> int | None:
        if self.class_names is not None:
            return len(self.class_names)
        if self.synth is not None:
            return self.synth.n_classes
        return None


def _plain(obj):
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------- validation

_MISSING = object()


class _Checker:
    def __init__(self, raw):
        self.problems: list[tuple[str, str]] = []
        if not isinstance(raw, Mapping):
            self.problems.append(("<root>", f"config must be a mapping, got {type(raw).__name__}"))
            raw = {}
        self.raw = raw

    def fail(self, path: str, msg: str):
        self.problems.append((path, msg))

    def section(self, name: str) -> Mapping:
        sec = self.raw.get(name, {})
        if sec is None:
            return {}
        if not isinstance(sec, Mapping):
            self.fail(name, f"section must be a mapping, got {type(sec).__name__}")
            return {}
        return sec

    def get(self, sec: Mapping, path: str, key: str, conv: Callable[[Any], Any], default=_MISSING):
        full = f"{path}.{key}"
        if key not in sec or sec[key] is None:
            if default is _MISSING:
                self.fail(full, "required field is missing")
            return None if default is _MISSING else default
        try:
            return conv(sec[key])
        except (TypeError, ValueError, OverflowError) as exc:
            self.fail(full, str(exc))
            return None if default is _MISSING else default


def _int(lo: int | None = None):
    def conv(v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise TypeError(f"expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ValueError(f"must be >= {lo}, got {v}")
        return v
    return conv


def _float(lo: float | None = None, hi: float | None = None, open_lo=False, open_hi=False):
    def conv(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise TypeError(f"expected a number, got {v!r}")
        v = float(v)
        if not math.isfinite(v):
            raise ValueError(f"must be finite, got {v}")
        if lo is not None and (v < lo or (open_lo and v == lo)):
            raise ValueError(f"must be {'>' if open_lo else '>='} {lo}, got {v}")
        if hi is not None and (v > hi or (open_hi and v == hi)):
            raise ValueError(f"must be {'<' if open_hi else '<='} {hi}, got {v}")
        return v
    return conv


def _bool(v):
    if not isinstance(v, bool):
        raise TypeError(f"expected true/false, got {v!r}")
    return v


def _str(v):
    if not isinstance(v, str) or not v:
        raise TypeError(f"expected a nonempty string, got {v!r}")
    return v


def _choice(options: Sequence[str]):
    def conv(v):
        if not isinstance(v, str) or v not in options:
            raise ValueError(f"unknown value {v!r}; expected one of {list(options)}")
        return v
    return conv


def _list(item):
    def conv(v):
        if isinstance(v, (str, bytes)) or not isinstance(v, Sequence):
            raise TypeError(f"expected a list, got {v!r}")
        return tuple(item(x) for x in v)
    return conv


def _floats3(v):
    out = _list(_float())(v)
    if not out:
        raise ValueError("expected at least one value")
    return out


_SYNTH_FIELDS = {
    "n_domains": _int(2), "n_classes": _int(2), "samples_per_class": _int(1), "image_side": _int(2),
    "class_signal_strength": _float(), "domain_shift_strength": _float(), "noise_sigma": _float(0.0),
    "channels": _int(1), "domain_names": _list(_str),
}


def _check_synth(chk: _Checker, raw) -> tuple[SynthSpec | None, int]:
    if raw is None:
        return None, 0
    if not isinstance(raw, Mapping):
        chk.fail("data.synth", "must be a mapping")
        return None, 0
    kwargs = {}
    for key, conv in _SYNTH_FIELDS.items():
        val = chk.get(raw, "data.synth", key, conv, default=None)
        if val is not None:
            kwargs[key] = val
    for key in raw:
        if key not in _SYNTH_FIELDS and key != "seed":
            chk.fail(f"data.synth.{key}", "unknown field")
    seed = chk.get(raw, "data.synth", "seed", _int(), default=0)
    try:
        return SynthSpec(**kwargs), seed
    except DataError as exc:
        chk.fail("data.synth", str(exc))
        return None, seed


def _check_augment(chk: _Checker, raw) -> AugmentParams:
    if raw is None or raw is True:
        return AugmentParams()
    if raw is False:
        return AugmentParams.disabled()
    if not isinstance(raw, Mapping):
        chk.fail("data.augment", "must be a mapping or a boolean")
        return AugmentParams()
    kwargs = {}
    known = {f.name for f in fields(AugmentParams)}
    for key, val in raw.items():
        path = f"data.augment.{key}"
        if key not in known:
            chk.fail(path, "unknown field")
            continue
        if key.startswith("p_"):
            v = chk.get(raw, "data.augment", key, _float(0.0, 1.0), default=None)
        elif key == "blur_sigma":
            v = chk.get(raw, "data.augment", key, _list(_float(0.0)), default=None)
            if v is not None and (len(v) != 2 or v[0] > v[1]):
                chk.fail(path, "expected [low, high] with low <= high")
                v = None
        else:
            v = chk.get(raw, "data.augment", key, _float(0.0), default=None)
        if v is not None:
            kwargs[key] = v
    return AugmentParams(**kwargs)


def _check_encoder(chk: _Checker, enc) -> Mapping[str, Any]:
    if enc is None or (isinstance(enc, Mapping) and not enc):
        chk.fail("encoder", "missing encoder spec")
        return {}
    if not isinstance(enc, Mapping):
        chk.fail("encoder", "must be a mapping")
        return {}
    kind = chk.get(enc, "encoder", "kind", _choice(("toy", "pretrained")))
    if kind == "toy":
        for key in ("d_i", "c_f", "d_t", "context_length", "channels", "image_side"):
            chk.get(enc, "encoder", key, _int(1), default=None)
        chk.get(enc, "encoder", "seed", _int(), default=None)
        chk.get(enc, "encoder", "text_arch", _choice(("attention", "bag")), default=None)
        chk.get(enc, "encoder", "dtype", _choice(("float32", "float64")), default=None)
    elif kind == "pretrained":
        for part in ("vision", "text"):
            sub = enc.get(part)
            if not isinstance(sub, Mapping):
                chk.fail(f"encoder.{part}", "required mapping with 'path' and 'kind'")
                continue
            chk.get(sub, f"encoder.{part}", "path", _str)
            chk.get(sub, f"encoder.{part}", "kind", _choice(("clip", "bert")))
    return dict(enc)


def validate_config(raw) -> ExperimentConfig:
    """Check a parsed config document and return the resolved, immutable config.

    Raises :class:`ConfigError` listing every problem found (never anything
    else, whatever the input).
    """
    chk = _Checker(raw)
    exp, data, strat, out = (chk.section(s) for s in ("experiment", "data", "strategy", "output"))
    for top in chk.raw:
        if top not in ("experiment", "data", "encoder", "strategy", "output"):
            chk.fail(str(top), "unknown section")

    strategy = chk.get(exp, "experiment", "strategy", _choice(STRATEGIES))
    name = chk.get(exp, "experiment", "name", _str, default="experiment")
    seeds = chk.get(exp, "experiment", "seeds", _list(_int()), default=DEFAULT_SEEDS)
    if seeds is not None and not seeds:
        chk.fail("experiment.seeds", "at least one trial seed is required")
    steps = chk.get(exp, "experiment", "steps", _int(0), default=5000)
    eval_interval = chk.get(exp, "experiment", "eval_interval", _int(1), default=100)
    workers = chk.get(exp, "experiment", "workers", _int(1), default=1)

    synth, synth_seed = _check_synth(chk, data.get("synth"))
    root = chk.get(data, "data", "root", _str, default=None)
    if root is None and synth is None and not any(p.startswith("data.synth") for p, _ in chk.problems):
        chk.fail("data.root", "either data.root or data.synth is required")
    default_domains = synth.names if synth is not None else _MISSING
    domains = chk.get(data, "data", "domains", _list(_str), default=default_domains)
    domains = tuple(domains or ())
    if len(set(domains)) != len(domains):
        chk.fail("data.domains", "domain names must be unique")
    if synth is not None and domains and not set(domains) <= set(synth.names):
        chk.fail("data.domains", f"synthetic domains are {list(synth.names)}")
    target = chk.get(data, "data", "target", _str, default=None)
    sources = chk.get(data, "data", "sources", _list(_str), default=None)
    if sources is None:
        sources = tuple(d for d in domains if d != target) if target is not None else tuple(domains)
    if target is not None and target in sources:
        chk.fail("data.target", "target_domain must not appear in source_domains")
    for d in (*sources, *([target] if target else [])):
        if domains and d not in domains:
            chk.fail("data", f"domain {d!r} is not listed in data.domains")
    val_fraction = chk.get(data, "data", "val_fraction",
                           _float(0.0, 1.0, open_lo=True, open_hi=True), default=0.2)
    class_names = chk.get(data, "data", "class_names", _list(_str), default=None)
    if class_names is not None and len(set(class_names)) != len(class_names):
        chk.fail("data.class_names", "class names must be unique")
    if class_names is not None and synth is not None and len(class_names) != synth.n_classes:
        chk.fail("data.class_names", f"expected {synth.n_classes} names to match data.synth.n_classes")

    encoder = _check_encoder(chk, chk.raw.get("encoder"))
    toy = encoder.get("kind") == "toy"
    side = chk.get(data, "data", "image_side", _int(1),
                   default=synth.image_side if synth is not None else 224)
    mean = chk.get(data, "data", "mean", _floats3, default=(0.0, 0.0, 0.0) if toy else CLIP_MEAN)
    std = chk.get(data, "data", "std", _floats3, default=(1.0, 1.0, 1.0) if toy else CLIP_STD)
    if std is not None and any(s <= 0 for s in std):
        chk.fail("data.std", "every std must be > 0")
    augment = _check_augment(chk, data.get("augment"))

    b = chk.get(strat, "strategy", "b", _int(1), default=32)
    lr = chk.get(strat, "strategy", "lr", _float(0.0), default=5e-6)
    wd = chk.get(strat, "strategy", "weight_decay", _float(0.0), default=0.0)
    optimizer = chk.get(strat, "strategy", "optimizer", _choice(OPTIMIZERS), default="adamw")
    prompt_set = chk.get(strat, "strategy", "prompt_set", _choice(PROMPT_FAMILIES), default="I")
    template = chk.get(strat, "strategy", "prompt_template", _str, default=DEFAULT_TEMPLATE)
    if template is not None and "{c}" not in template:
        chk.fail("strategy.prompt_template", "template must contain the '{c}' slot")
    prompt_file = chk.get(strat, "strategy", "prompt_file", _str, default=None)
    n_p = chk.get(strat, "strategy", "n_p", _int(0), default=4)
    if strategy == "cooplvt" and n_p is not None and n_p < 1:
        chk.fail("strategy.n_p", "n_p must be >= 1 for cooplvt")
    mlp_layers = chk.get(strat, "strategy", "mlp_layers", _int(1), default=2)
    scale_init = chk.get(strat, "strategy", "logit_scale_init", _float(1.0, 100.0), default=CLIP_LOGIT_SCALE)
    learn_scale = chk.get(strat, "strategy", "learn_logit_scale", _bool, default=True)
    train_vision = chk.get(strat, "strategy", "train_vision", _bool, default=True)
    train_projector = chk.get(strat, "strategy", "train_projector", _bool, default=True)

    out_dir = chk.get(out, "output", "dir", _str, default="runs")
    overwrite = chk.get(out, "output", "overwrite", _bool, default=False)

    if chk.problems:
        raise ConfigError(chk.problems)
    return ExperimentConfig(
        strategy=strategy, domains=domains, source_domains=tuple(sources), target_domain=target,
        encoder=encoder, name=name, b=b, lr=lr, weight_decay=wd, optimizer=optimizer, steps=steps,
        eval_interval=eval_interval, val_fraction=val_fraction, trial_seeds=tuple(seeds),
        prompt_set=prompt_set, prompt_template=template, prompt_file=prompt_file,
        class_names=class_names, n_p=n_p, mlp_layers=mlp_layers, logit_scale_init=scale_init,
        learn_logit_scale=learn_scale, train_vision=train_vision, train_projector=train_projector,
        data_root=root, synth=synth, synth_seed=synth_seed,
        normalize=NormalizeParams(side, tuple(mean), tuple(std)), augment=augment,
        output_dir=out_dir, overwrite=overwrite, workers=workers,
    )


def apply_overrides(raw: Mapping, overrides: Mapping[str, Any]) -> dict:
    """Return a copy of ``raw`` with dotted-path ``overrides`` set (``None`` values skipped)."""
    doc = json.loads(json.dumps(raw if isinstance(raw, Mapping) else {}, default=str))
    for path, value in overrides.items():
        if value is None:
            continue
        node = doc
        *parents, leaf = path.split(".")
        for p in parents:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[leaf] = value
    return doc
