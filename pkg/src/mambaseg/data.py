"""Deterministic synthetic segmentation datasets.

Each sample is a single-channel image containing a few randomly posed
ellipses or rectangles on a noisy background; the label map records which
class painted each pixel (later shapes overwrite earlier ones).  Every
sample is drawn from its own named random stream, so a dataset is a pure
function of its spec — byte-identical across runs, machines, and partial
regeneration.

Datasets can be cached to a flat binary file: a small header carrying a
hash of the generating ``SyntheticDatasetSpec`` plus the array dimensions,
followed by the raw image and label payloads.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .rng import stream

SHAPE_KINDS = ("ellipse", "rectangle")

CACHE_MAGIC = b"MSDS"
CACHE_VERSION = 1


class DatasetError(ValueError):
    """Invalid dataset spec or unreadable cache file."""


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Full description of a synthetic dataset; hashable and serializable."""

    image_size: int = 32
    num_classes: int = 2
    shapes_per_image: int = 1
    noise_level: float = 0.05
    num_samples: int = 64
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    shape_kinds: tuple = SHAPE_KINDS
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise DatasetError("image_size must be at least 8")
        if self.num_classes < 2:
            raise DatasetError("num_classes must be at least 2")
        if self.shapes_per_image < 1:
            raise DatasetError("shapes_per_image must be positive")
        if self.noise_level < 0:
            raise DatasetError("noise_level must be nonnegative")
        if self.num_samples < 1:
            raise DatasetError("num_samples must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise DatasetError("test_fraction must lie in (0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise DatasetError("val_fraction must lie in (0, 1)")
        object.__setattr__(self, "shape_kinds", tuple(self.shape_kinds))
        for kind in self.shape_kinds:
            if kind not in SHAPE_KINDS:
                raise DatasetError(f"unknown shape kind {kind!r}")
        if not self.shape_kinds:
            raise DatasetError("shape_kinds must be nonempty")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()[:16]


@dataclass(frozen=True)
class Dataset:
    """Generated samples plus the deterministic train/val/test partition."""

    spec: SyntheticDatasetSpec
    images: np.ndarray  # (n, size, size, 1) float64
    labels: np.ndarray  # (n, size, size) int64

    def _bounds(self):
        n = self.spec.num_samples
        n_test = max(1, round(n * self.spec.test_fraction))
        n_trainval = n - n_test
        n_val = max(1, round(n_trainval * self.spec.val_fraction))
        n_train = n_trainval - n_val
        if n_train < 1:
            raise DatasetError("split fractions leave no training samples")
        return n_train, n_val, n_test

    def split(self, name: str):
        """(images, labels) views for 'train', 'val', or 'test'."""
        n_train, n_val, _ = self._bounds()
        ranges = {
            "train": slice(0, n_train),
            "val": slice(n_train, n_train + n_val),
            "test": slice(n_train + n_val, self.spec.num_samples),
        }
        if name not in ranges:
            raise KeyError(f"unknown split {name!r}")
        sl = ranges[name]
        return self.images[sl], self.labels[sl]

    def split_sizes(self) -> dict:
        n_train, n_val, n_test = self._bounds()
        return {"train": n_train, "val": n_val, "test": n_test}


def _shape_mask(kind, size, rng):
    """Boolean mask of one randomly posed shape on a size×size grid."""
    cy, cx = rng.uniform(0.25, 0.75, size=2) * size
    ry, rx = rng.uniform(0.12, 0.35, size=2) * size
    theta = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    if kind == "ellipse":
        return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
    return (np.abs(u) <= ry) & (np.abs(v) <= rx)


def _render_sample(spec: SyntheticDatasetSpec, index: int):
    rng = stream(spec.seed, "data", "sample", str(index))
    size = spec.image_size
    image = np.zeros((size, size), dtype=np.float64)
    label = np.zeros((size, size), dtype=np.int64)
    for _ in range(spec.shapes_per_image):
        cls = int(rng.integers(1, spec.num_classes))
        kind = spec.shape_kinds[int(rng.integers(len(spec.shape_kinds)))]
        mask = _shape_mask(kind, size, rng)
        base = 0.35 + 0.65 * cls / (spec.num_classes - 1)
        image[mask] = base + rng.uniform(-0.1, 0.1)
        label[mask] = cls
    image = image + rng.normal(0.0, 1.0, size=(size, size)) * spec.noise_level
    return image[..., None], label


def generate_dataset(spec: SyntheticDatasetSpec) -> Dataset:
    """Materialize every sample described by ``spec`` (deterministic in it alone)."""
    size = spec.image_size
    images = np.empty((spec.num_samples, size, size, 1), dtype=np.float64)
    labels = np.empty((spec.num_samples, size, size), dtype=np.int64)
    for i in range(spec.num_samples):
        images[i], labels[i] = _render_sample(spec, i)
    ds = Dataset(spec=spec, images=images, labels=labels)
    ds._bounds()  # validate the partition is feasible for this sample count
    return ds


# ---------------------------------------------------------------------------
# flat binary cache

def save_dataset(ds: Dataset, path: str) -> None:
    """Write header (magic, version, spec hash/json, dims) + raw payloads."""
    spec_json = ds.spec.to_json().encode()
    header = CACHE_MAGIC
    header += struct.pack(
        "<IIII16s",
        CACHE_VERSION,
        ds.spec.num_samples,
        ds.spec.image_size,
        len(spec_json),
        ds.spec.digest(),
    )
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".dataset-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(spec_json)
            fh.write(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ds.labels, dtype="<i8").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path: str, spec: SyntheticDatasetSpec) -> Dataset:
    """Read a cache written for exactly this spec; mismatches are errors."""
    with open(path, "rb") as fh:
        data = fh.read()
    head_len = 4 + struct.calcsize("<IIII16s")
    if len(data) < head_len or data[:4] != CACHE_MAGIC:
        raise DatasetError("not a dataset cache file")
    version, n, size, json_len, digest = struct.unpack(
        "<IIII16s", data[4:head_len]
    )
    if version != CACHE_VERSION:
        raise DatasetError(f"unsupported cache version {version}")
    if digest != spec.digest():
        raise DatasetError("cache was generated from a different spec")
    offset = head_len + json_len
    img_bytes = n * size * size * 8
    if len(data) != offset + img_bytes + n * size * size * 8:
        raise DatasetError("cache payload truncated or padded")
    images = np.frombuffer(
        data, dtype="<f8", count=n * size * size, offset=offset
    ).reshape(n, size, size, 1).astype(np.float64)
    labels = np.frombuffer(
        data, dtype="<i8", count=n * size * size, offset=offset + img_bytes
    ).reshape(n, size, size).astype(np.int64)
    return Dataset(spec=spec, images=images, labels=labels)


def load_or_generate(spec: SyntheticDatasetSpec, cache_path=None) -> Dataset:
    """Use the cache when present and matching; otherwise generate (and cache)."""
    if cache_path and os.path.exists(cache_path):
        return load_dataset(cache_path, spec)
    ds = generate_dataset(spec)
    if cache_path:
        save_dataset(ds, cache_path)
    return ds
