"""Domain datasets, stratified splits, per-domain balanced batches and the
synthetic multi-domain generator."""

from __future__ import annotations

import csv
import logging
import math
import threading
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from clipdg.rng import derive_rng
from clipdg.transforms import resize

logger = logging.getLogger(__name__)

MANIFEST = "labels.csv"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".npy"}


class DataError(ValueError):
    pass


class TargetAccessError(RuntimeError):
    """Raised when a held-out domain is read during training or selection."""


@dataclass(frozen=True)
class ImageTensor:
    pixels: np.ndarray
    domain: str
    sample_id: str

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class AccessRecord:
    phase: str
    domain: str
    n_samples: int


class AccessLog:
    """Thread-safe record of every sample read, tagged by protocol phase."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[AccessRecord] = []

    def record(self, phase: str, domain: str, n_samples: int) -> None:
        with self._lock:
            self._records.append(AccessRecord(phase, domain, int(n_samples)))

    @property
    def records(self) -> list[AccessRecord]:
        with self._lock:
            return list(self._records)

    def reads(self, domain: str | None = None, phases: Sequence[str] | None = None) -> int:
        return sum(r.n_samples for r in self.records
                   if (domain is None or r.domain == domain)
                   and (phases is None or r.phase in phases))

    def domains_read(self, phases: Sequence[str] | None = None) -> set[str]:
        return {r.domain for r in self.records
                if r.n_samples > 0 and (phases is None or r.phase in phases)}


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """Labeled images of one named domain.

    ``images`` is an ``(N, C, H, W)`` array. Reading pixels goes through
    :meth:`take`, which reports the read to the attached access hook; labels
    and the class inventory are metadata and are not logged.
    """

    name: str
    images: np.ndarray
    labels: np.ndarray
    sample_ids: tuple[str, ...]
    _reader: Callable[[str, int], None] | None = field(default=None, repr=False)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if len(self.images) != len(labels) or len(labels) != len(self.sample_ids):
            raise DataError(f"domain {self.name!r}: images, labels and ids differ in length")
        if np.any(labels < 0):
            raise DataError(f"domain {self.name!r}: negative label")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_inventory(self) -> frozenset[int]:
        return frozenset(int(v) for v in np.unique(self.labels))

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def take(self, indices) -> tuple[np.ndarray, np.ndarray]:
        indices = np.asarray(indices, dtype=np.int64)
        if self._reader is not None:
            self._reader(self.name, len(indices))
        return self.images[indices], self.labels[indices]

    def all(self) -> tuple[np.ndarray, np.ndarray]:
        return self.take(np.arange(len(self)))

    def sample(self, i: int) -> tuple[ImageTensor, int]:
        x, y = self.take([i])
        return ImageTensor(x[0], self.name, self.sample_ids[i]), int(y[0])

    def subset(self, indices) -> "DomainDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[indices], labels=self.labels[indices],
                       sample_ids=tuple(self.sample_ids[i] for i in indices))

    def with_reader(self, reader: Callable[[str, int], None] | None) -> "DomainDataset":
        return replace(self, _reader=reader)


@dataclass(frozen=True)
class SplitPair:
    train: DomainDataset
    val: DomainDataset
    ratio: float
    seed: int


@dataclass(frozen=True)
class DGBatch:
    images: np.ndarray
    labels: np.ndarray
    domain_of: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class SynthSpec:
    n_domains: int = 4
    n_classes: int = 5
    samples_per_class: int = 40
    image_side: int = 16
    class_signal_strength: float = 1.0
    domain_shift_strength: float = 0.5
    noise_sigma: float = 0.3
    channels: int = 3
    domain_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n_classes < 2:
            raise DataError("SynthSpec.n_classes must be >= 2")
        if self.n_domains < 2:
            raise DataError("SynthSpec.n_domains must be >= 2")
        if self.samples_per_class < 1 or self.image_side < 2 or self.channels < 1:
            raise DataError("SynthSpec sizes must be positive")
        if self.noise_sigma < 0:
            raise DataError("SynthSpec.noise_sigma must be >= 0")
        if self.domain_names is not None and len(self.domain_names) != self.n_domains:
            raise DataError("SynthSpec.domain_names must name every domain")

    @property
    def names(self) -> tuple[str, ...]:
        if self.domain_names is not None:
            return tuple(self.domain_names)
        return tuple(f"synth{d}" for d in range(self.n_domains))

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.domain_names is not None:
            d["domain_names"] = list(self.domain_names)
        return d


# ---------------------------------------------------------------- disk I/O

def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".npy":
        arr = np.load(path)
        if arr.ndim == 2:
            arr = arr[None]
        return arr.astype(np.float32, copy=False)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_domain(root_path, domain_name: str, num_classes: int = 5, side: int | None = None) -> DomainDataset:
    """Load ``<root>/<domain>/labels.csv`` and the images it references.

    When ``side`` is given each image is bilinearly resized on load so that
    domains with mixed resolutions stack into one array.
    """
    ddir = Path(root_path) / domain_name
    manifest = ddir / MANIFEST
    if not manifest.is_file():
        raise DataError(f"domain {domain_name!r}: manifest not found at {manifest}")
    with manifest.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"empty domain {domain_name!r}: {manifest} is empty")
        if not {"path", "label"} <= set(reader.fieldnames):
            raise DataError(f"{manifest}: header must be 'path,label'")
        rows = list(reader)
    if not rows:
        raise DataError(f"empty domain {domain_name!r}: {manifest} lists no samples")

    images, labels, ids = [], [], []
    for lineno, row in enumerate(rows, start=2):
        try:
            label = int(row["label"])
        except (TypeError, ValueError):
            raise DataError(f"{manifest}:{lineno}: label {row['label']!r} is not an integer") from None
        if not 0 <= label < num_classes:
            raise DataError(
                f"{manifest}:{lineno}: label {label} outside [0, {num_classes - 1}] (path {row['path']!r})")
        path = ddir / row["path"]
        if not path.is_file():
            raise DataError(f"{manifest}:{lineno}: missing image file {path}")
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            raise DataError(f"{manifest}:{lineno}: unsupported image type {path.suffix!r}")
        img = _read_image(path)
        if side is not None:
            img = resize(img, side)
        images.append(img)
        labels.append(label)
        ids.append(row["path"])

    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise DataError(f"domain {domain_name!r}: mixed image shapes {sorted(shapes)}; pass side=")
    return DomainDataset(domain_name, np.stack(images), np.asarray(labels), tuple(ids))


def write_domain(ds: DomainDataset, root_path) -> Path:
    """Materialize ``ds`` in the standard directory layout (``.npy`` images)."""
    ddir = Path(root_path) / ds.name
    (ddir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, label) in enumerate(zip(ds.images, ds.labels)):
        rel = f"images/{i:06d}.npy"
        np.save(ddir / rel, np.asarray(img, dtype=np.float32))
        rows.append((rel, int(label)))
    with (ddir / MANIFEST).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        w.writerows(rows)
    return ddir


# ---------------------------------------------------------------- splitting

def _train_counts(class_sizes: Mapping[int, int], ratio: float) -> dict[int, int]:
    """Largest-remainder allocation of the training share per class."""
    total = sum(class_sizes.values())
    target = int(math.floor(ratio * total + 0.5))
    counts, frac = {}, {}
    for c, n in class_sizes.items():
        if n == 1:
            counts[c] = 1
            continue
        counts[c] = int(math.floor(ratio * n))
        frac[c] = ratio * n - counts[c]
    remaining = target - sum(counts.values())
    for c in sorted(frac, key=lambda c: (-frac[c], c)):
        if remaining <= 0:
            break
        if counts[c] < class_sizes[c]:
            counts[c] += 1
            remaining -= 1
    return counts


def split_train_val(d: DomainDataset, ratio: float = 0.8, seed: int = 0) -> SplitPair:
    """Stratified train/val split, deterministic in ``seed``.

    Each class contributes ``floor`` or ``ceil`` of ``ratio * n_class`` training
    samples, with the total matching ``round(ratio * N)``. A class with a single
    sample sends it to train.
    """
    if not 0 < ratio < 1:
        raise DataError(f"split ratio must lie in (0, 1), got {ratio}")
    rng = derive_rng(seed, f"splitter/{d.name}")
    sizes = Counter(int(v) for v in d.labels)
    for c, n in sorted(sizes.items()):
        if n == 1:
            logger.warning("domain %r: class %d has a single sample; assigned to train", d.name, c)
    counts = _train_counts(dict(sorted(sizes.items())), ratio)

    train_idx, val_idx = [], []
    for c in sorted(sizes):
        idx = np.flatnonzero(d.labels == c)
        idx = idx[rng.permutation(len(idx))]
        train_idx.append(idx[:counts[c]])
        val_idx.append(idx[counts[c]:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    return SplitPair(d.subset(train_idx), d.subset(val_idx), ratio, seed)


# ---------------------------------------------------------------- batching

class _Cycler:
    """Endless index stream over one domain, reshuffled at every epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def draw(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            step = min(k, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + step])
            self.pos += step
            k -= step
        return np.concatenate(out)


def make_dg_batches(sources: Sequence[DomainDataset], b: int, seed: int = 0,
                    n_batches: int | None = None) -> Iterator[DGBatch]:
    """Yield batches holding exactly ``b`` samples from every source domain.

    Sampling is without replacement within an epoch of each domain; a domain
    smaller than ``b`` (or exhausted mid-batch) simply starts a new shuffled
    epoch, so small domains cycle rather than raise. The stream is infinite
    unless ``n_batches`` is given.
    """
    if b < 1:
        raise DataError(f"per-domain batch size must be >= 1, got {b}")
    if not sources:
        raise DataError("make_dg_batches needs at least one source domain")
    for s in sources:
        if len(s) == 0:
            raise DataError(f"source domain {s.name!r} is empty")
    cyclers = [_Cycler(len(s), derive_rng(seed, f"sampler/{i}/{s.name}")) for i, s in enumerate(sources)]

    emitted = 0
    while n_batches is None or emitted < n_batches:
        images, labels, domains = [], [], []
        for s, cyc in zip(sources, cyclers):
            x, y = s.take(cyc.draw(b))
            images.append(x)
            labels.append(y)
            domains.extend([s.name] * b)
        yield DGBatch(np.concatenate(images), np.concatenate(labels), tuple(domains))
        emitted += 1


# ---------------------------------------------------------------- synthetic data

def _radial_class_signals(n_classes: int, side: int) -> np.ndarray:
    """Pairwise-orthogonal, rotation/flip-symmetric ring patterns, unit RMS."""
    coords = np.arange(side) - (side - 1) / 2.0
    r = np.hypot(*np.meshgrid(coords, coords, indexing="ij"))
    r = r / r.max()
    basis = np.stack([np.cos(np.pi * (k + 1) * r) for k in range(n_classes)]).reshape(n_classes, -1)
    q, rr = np.linalg.qr(basis.T)
    if np.min(np.abs(np.diag(rr))) < 1e-8:
        raise DataError(f"image_side={side} too small for {n_classes} orthogonal class signals")
    q = q.T * np.sign(np.diag(rr))[:, None]
    return q.reshape(n_classes, side, side) * side


def synth_domains(spec: SynthSpec, seed: int = 0) -> list[DomainDataset]:
    """Generate ``n_domains`` labeled datasets.

    Each image is ``class_signal[y] * s_c + domain_pattern[d] * s_d + noise``.
    Class signals are concentric ring patterns (identical across channels),
    pairwise orthogonal with unit RMS. Each domain pattern is a per-channel tint
    plus an illumination ramp, projected off the class-signal span and scaled
    to unit RMS, then added identically to every image of that domain.
    """
    c, side, k = spec.channels, spec.image_side, spec.n_classes
    signals = _radial_class_signals(k, side)
    signals = np.broadcast_to(signals[:, None], (k, c, side, side)) / np.sqrt(c)
    flat_signals = signals.reshape(k, -1)
    basis = flat_signals / np.linalg.norm(flat_signals, axis=1, keepdims=True)

    pattern_rng = derive_rng(seed, "synth/domain-patterns")
    ramp = np.linspace(-1.0, 1.0, side)
    out = []
    for d, name in enumerate(spec.names):
        tint = pattern_rng.normal(size=(c, 1, 1))
        gy, gx = pattern_rng.normal(size=2)
        pattern = tint + (gy * ramp[:, None] + gx * ramp[None, :])[None]
        pattern = np.broadcast_to(pattern, (c, side, side)).reshape(-1)
        pattern = pattern - basis.T @ (basis @ pattern)
        rms = np.sqrt(np.mean(pattern**2))
        pattern = (pattern / rms if rms > 0 else pattern).reshape(c, side, side)

        noise_rng = derive_rng(seed, f"synth/noise/{d}")
        labels = np.repeat(np.arange(k), spec.samples_per_class)
        images = (spec.class_signal_strength * signals[labels]
                  + spec.domain_shift_strength * pattern[None]
                  + spec.noise_sigma * noise_rng.normal(size=(len(labels), c, side, side)))
        ids = tuple(f"{name}/{i:05d}" for i in range(len(labels)))
        out.append(DomainDataset(name, images.astype(np.float32), labels, ids))
    return out


# ---------------------------------------------------------------- registry

class DomainRegistry:
    """Named domains behind an access log, with phase-scoped read fences.

    ``view(phase, forbidden)`` hands out datasets whose reads are logged under
    ``phase``; asking a view for a forbidden domain raises
    :class:`TargetAccessError`.
    """

    def __init__(self, loaders: Mapping[str, Callable[[], DomainDataset] | DomainDataset],
                 log: AccessLog | None = None):
        self._loaders = dict(loaders)
        self._cache: dict[str, DomainDataset] = {}
        self._lock = threading.Lock()
        self.log = log or AccessLog()

    @classmethod
    def from_datasets(cls, datasets: Sequence[DomainDataset], log: AccessLog | None = None) -> "DomainRegistry":
        return cls({d.name: d for d in datasets}, log)

    @classmethod
    def from_root(cls, root, names: Sequence[str], num_classes: int, side: int | None = None,
                  log: AccessLog | None = None) -> "DomainRegistry":
        loaders = {n: (lambda n=n: load_domain(root, n, num_classes, side)) for n in names}
        return cls(loaders, log)

    @property
    def names(self) -> list[str]:
        return list(self._loaders)

    def _raw(self, name: str) -> DomainDataset:
        if name not in self._loaders:
            raise KeyError(f"unknown domain {name!r}; configured: {self.names}")
        with self._lock:
            if name not in self._cache:
                src = self._loaders[name]
                self._cache[name] = src if isinstance(src, DomainDataset) else src()
            return self._cache[name]

    def class_inventory(self, name: str) -> frozenset[int]:
        return self._raw(name).class_inventory

    def view(self, phase: str, forbidden: Sequence[str] = ()) -> "DomainView":
        return DomainView(self, phase, frozenset(forbidden))


class DomainView:
    def __init__(self, registry: DomainRegistry, phase: str, forbidden: frozenset[str]):
        self.registry, self.phase, self.forbidden = registry, phase, forbidden

    def get(self, name: str) -> DomainDataset:
        if name in self.forbidden:
            raise TargetAccessError(f"domain {name!r} is held out and may not be read during {self.phase!r}")
        log = self.registry.log
        return self.registry._raw(name).with_reader(lambda dom, n: log.record(self.phase, dom, n))

