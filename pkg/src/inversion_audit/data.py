"""Dataset loading, class-balanced subsetting and the synthetic shapes toy set.

All pixels are float32 in [0, 1] with no mean/std normalization.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from .errors import ConfigError, DatasetError

log = logging.getLogger(__name__)

CACHE_ENV = "INVERSION_AUDIT_CACHE"

BENCHMARKS = {
    "MNIST": ((1, 28, 28), 10),
    "FashionMNIST": ((1, 28, 28), 10),
    "SVHN": ((3, 32, 32), 10),
    "CIFAR10": ((3, 32, 32), 10),
}
SYNTHETIC = "SyntheticShapes"
SHAPES = ("bar", "square", "circle", "cross")

# CLI spellings
ALIASES = {
    "mnist": "MNIST",
    "fashionmnist": "FashionMNIST",
    "fashion-mnist": "FashionMNIST",
    "svhn": "SVHN",
    "cifar10": "CIFAR10",
    "cifar-10": "CIFAR10",
    "synthetic": SYNTHETIC,
    "syntheticshapes": SYNTHETIC,
}


def canonical_name(name: str) -> str:
    if name in BENCHMARKS or name == SYNTHETIC:
        return name
    try:
        return ALIASES[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {sorted(ALIASES)}") from None


def default_cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "inversion_audit"))


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    image_shape: tuple = None
    num_classes: int = None
    subset_size: Optional[int] = None
    split: str = "train"
    seed: int = 0  # only used by SyntheticShapes
    source: str = "auto"

    def __post_init__(self):
        name = canonical_name(self.name)
        object.__setattr__(self, "name", name)
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.subset_size is not None and self.subset_size < 0:
            raise ConfigError("subset_size must be >= 0")
        if name in BENCHMARKS:
            shape, n = BENCHMARKS[name]
            if self.image_shape is not None and tuple(self.image_shape) != shape:
                raise ConfigError(f"{name} images are {shape}, got {self.image_shape}")
            if self.num_classes is not None and self.num_classes != n:
                raise ConfigError(f"{name} has {n} classes, got {self.num_classes}")
            object.__setattr__(self, "image_shape", shape)
            object.__setattr__(self, "num_classes", n)
        else:
            shape = tuple(self.image_shape) if self.image_shape is not None else (1, 28, 28)
            n = self.num_classes if self.num_classes is not None else len(SHAPES)
            if not 2 <= n <= len(SHAPES):
                raise ConfigError(f"{SYNTHETIC} supports 2..{len(SHAPES)} classes, got {n}")
            if len(shape) != 3 or min(shape[1:]) < 12:
                raise ConfigError(f"{SYNTHETIC} needs a (c, h, w) shape with h, w >= 12")
            object.__setattr__(self, "image_shape", shape)
            object.__setattr__(self, "num_classes", n)

    def as_dict(self):
        return {
            "name": self.name,
            "image_shape": list(self.image_shape),
            "num_classes": self.num_classes,
            "subset_size": self.subset_size,
            "split": self.split,
            "seed": self.seed,
            "source": self.source,
        }


@dataclass(frozen=True)
class ImageBatch:
    pixels: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __len__(self):
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class ImageCollection:
    """Immutable, index-stable dataset. ``source_index`` maps back to the raw archive."""

    spec: DatasetSpec
    pixels: torch.Tensor
    labels: torch.Tensor
    source_index: torch.Tensor
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels.requires_grad_(False)

    def __len__(self):
        return self.pixels.shape[0]

    def __getitem__(self, idx):
        return ImageBatch(self.pixels[idx], self.labels[idx])

    def class_counts(self):
        return torch.bincount(self.labels, minlength=self.spec.num_classes).tolist()

    def class_indices(self, k: int) -> torch.Tensor:
        return torch.nonzero(self.labels == k, as_tuple=True)[0]


def balanced_subset(labels: np.ndarray, per_class: Optional[int], num_classes: int) -> np.ndarray:
    """First ``per_class`` indices of every class, in original order."""
    if per_class is None:
        return np.arange(len(labels))
    keep = [np.flatnonzero(labels == k)[:per_class] for k in range(num_classes)]
    return np.sort(np.concatenate(keep))


# --- synthetic shapes ------------------------------------------------------


def _draw_shape(kind, h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    m = min(h, w)
    cy = h / 2 + rng.uniform(-0.12, 0.12) * h
    cx = w / 2 + rng.uniform(-0.12, 0.12) * w
    size = rng.uniform(0.22, 0.32) * m
    thick = rng.uniform(0.06, 0.1) * m
    if kind == "bar":
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= size)
        else:
            mask = (np.abs(xx - cx) <= thick) & (np.abs(yy - cy) <= size)
    elif kind == "square":
        d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
        mask = np.abs(d - size) <= thick / 2
    elif kind == "circle":
        r = np.hypot(yy - cy, xx - cx)
        mask = np.abs(r - size) <= thick / 2
    elif kind == "cross":
        mask = ((np.abs(yy - cy) <= thick / 2) & (np.abs(xx - cx) <= size)) | (
            (np.abs(xx - cx) <= thick / 2) & (np.abs(yy - cy) <= size)
        )
    else:
        raise ValueError(kind)
    return mask.astype(np.float32) * rng.uniform(0.75, 1.0)


def synthetic_shapes(spec: DatasetSpec, per_class: int = 100):
    """Label-determined bars/squares/circles/crosses; seeded by (spec.seed, split)."""
    c, h, w = spec.image_shape
    seed_seq = np.random.SeedSequence([spec.seed, 0 if spec.split == "train" else 1])
    rng = np.random.default_rng(seed_seq)
    n = spec.num_classes
    labels = np.tile(np.arange(n), per_class)
    images = np.empty((len(labels), c, h, w), dtype=np.float32)
    for i, k in enumerate(labels):
        img = _draw_shape(SHAPES[k], h, w, rng)
        tint = rng.uniform(0.8, 1.0, size=c).astype(np.float32) if c > 1 else np.ones(1, np.float32)
        images[i] = img[None] * tint[:, None, None]
    return images, labels


# --- benchmark archives ----------------------------------------------------


def _fetch_torchvision(name, split, root: Path):
    import torchvision.datasets as tvd

    train = split == "train"
    root.mkdir(parents=True, exist_ok=True)
    try:
        if name == "MNIST":
            ds = tvd.MNIST(root, train=train, download=True)
        elif name == "FashionMNIST":
            ds = tvd.FashionMNIST(root, train=train, download=True)
        elif name == "CIFAR10":
            ds = tvd.CIFAR10(root, train=train, download=True)
        elif name == "SVHN":
            ds = tvd.SVHN(root, split=split, download=True)
        else:
            raise ConfigError(f"no archive source for {name}")
    except ConfigError:
        raise
    except Exception as exc:  # network / checksum / corrupt archive
        raise DatasetError(name, f"download or checksum failed: {exc}") from exc

    if name == "SVHN":
        pixels = np.asarray(ds.data)  # (n, 3, 32, 32)
        labels = np.asarray(ds.labels)
    else:
        data = ds.data.numpy() if isinstance(ds.data, torch.Tensor) else np.asarray(ds.data)
        pixels = data[:, None] if data.ndim == 3 else data.transpose(0, 3, 1, 2)
        targets = ds.targets
        labels = targets.numpy() if isinstance(targets, torch.Tensor) else np.asarray(targets)
    return pixels, labels, f"torchvision:{name}"


def _bundled_mnist_subset():
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    return x.reshape(-1, 1, 28, 28), y, "mlxtend:mnist_5k"


def _raw_arrays(spec: DatasetSpec, root: Path):
    if spec.source in ("auto", "archive"):
        try:
            return _fetch_torchvision(spec.name, spec.split, root / "raw")
        except DatasetError:
            if spec.source == "archive" or spec.name != "MNIST" or spec.split != "train":
                raise
            log.warning("MNIST archive unavailable; using the bundled 5000-sample MNIST subset")
    if spec.source in ("auto", "bundled") and spec.name == "MNIST" and spec.split == "train":
        try:
            return _bundled_mnist_subset()
        except ImportError as exc:
            raise DatasetError(spec.name, "archive unavailable and mlxtend not installed") from exc
    raise ConfigError(f"source {spec.source!r} not available for {spec.name}/{spec.split}")


def _sha256(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _load_blob(spec: DatasetSpec, cache_dir: Path):
    root = Path(cache_dir) / spec.name
    blob = root / f"{spec.split}-{spec.source}.npz"
    sidecar = blob.with_suffix(".json")
    if blob.exists() and sidecar.exists():
        meta = json.loads(sidecar.read_text())
        with np.load(blob) as z:
            pixels, labels = z["pixels"], z["labels"]
        if _sha256(pixels) == meta["sha256"] and len(labels) == meta["count"]:
            return pixels, labels, meta
        log.warning("cached blob %s failed checksum; rebuilding", blob)

    raw, labels, source = _raw_arrays(spec, root)
    pixels = raw.astype(np.float32) / 255.0
    labels = labels.astype(np.int64)
    if pixels.shape[1:] != spec.image_shape:
        raise DatasetError(spec.name, f"unexpected image shape {pixels.shape[1:]}")
    meta = {
        "dataset": spec.name,
        "split": spec.split,
        "source": source,
        "shape": list(pixels.shape),
        "count": int(len(labels)),
        "sha256": _sha256(pixels),
        "scaling": "uint8 / 255 -> [0, 1], no mean/std normalization",
    }
    root.mkdir(parents=True, exist_ok=True)
    tmp = blob.with_name(blob.name + ".tmp.npz")
    np.savez(tmp, pixels=pixels, labels=labels)
    os.replace(tmp, blob)
    sidecar.write_text(json.dumps(meta, indent=2))
    return pixels, labels, meta


def load_dataset(spec: DatasetSpec, cache_dir=None) -> ImageCollection:
    if spec.name == SYNTHETIC:
        per_class = spec.subset_size if spec.subset_size is not None else 100
        pixels, labels = synthetic_shapes(spec, per_class)
        meta = {"dataset": spec.name, "source": "procedural", "seed": spec.seed, "split": spec.split}
    else:
        pixels, labels, meta = _load_blob(spec, cache_dir or default_cache_dir())

    idx = balanced_subset(labels, spec.subset_size, spec.num_classes)
    return ImageCollection(
        spec=spec,
        pixels=torch.from_numpy(np.ascontiguousarray(pixels[idx])),
        labels=torch.from_numpy(labels[idx].astype(np.int64)),
        source_index=torch.from_numpy(idx.astype(np.int64)),
        provenance=meta,
    )


def batch_iterator(collection: ImageCollection, batch_size: int, seed: int) -> Iterator[ImageBatch]:
    """One epoch in a seeded random order; the last batch may be short."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    g = torch.Generator().manual_seed(seed)
    order = torch.randperm(len(collection), generator=g)
    for start in range(0, len(order), batch_size):
        yield collection[order[start : start + batch_size]]
