"""Datasets: the built-in grating generator and a small manifest format.

Manifest files use the same ``key = value`` syntax as configs. Header keys
describe the set; every ``sample`` line reads
``sample = <relative path> <label> <split> <byte length>`` and points at a
tensor record (``H x W x C``) written by :mod:`pathvit.serialize`.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .serialize import SerializationError, load_tensor, record_length, save_tensor

MANIFEST_VERSION = 1


class IngestionError(IOError):
    """A dataset file is missing, truncated or malformed."""


class EmptyDatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x C
    labels: np.ndarray  # N
    num_classes: int
    label_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[tuple[np.ndarray, int]]:
        for img, lab in zip(self.images, self.labels):
            yield img, int(lab)

    def batches(self, batch_size: int, seed: int | None = None, epoch: int = 0, precision: str = "single") -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Mini-batches; shuffled deterministically from ``(seed, epoch)`` when a seed is given."""
        n = len(self)
        order = np.arange(n) if seed is None else np.random.default_rng([seed, epoch]).permutation(n)
        dt = np.float32 if precision == "single" else np.float64
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx].astype(dt, copy=False), self.labels[idx]

    def subset(self, count: int) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count], self.num_classes, self.label_names)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


GRATING_FREQUENCIES = (2, 6)


def synthetic_gratings(
    n: int = 5000,
    size: int = 32,
    channels: int = 1,
    seed: int = 0,
    frequencies: Sequence[int] = GRATING_FREQUENCIES,
    noise: float = 0.3,
) -> Dataset:
    """Axis-aligned sinusoidal gratings; the class is the spatial frequency.

    Each sample draws an orientation (horizontal or vertical), a phase, a
    contrast in [0.5, 1] and additive Gaussian noise, all from ``seed``.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(frequencies), size=n)
    vertical = rng.integers(0, 2, size=n).astype(bool)
    phase = rng.uniform(0, 2 * np.pi, size=n)
    contrast = rng.uniform(0.5, 1.0, size=n)
    coord = np.arange(size) / size
    freq = np.asarray(frequencies, dtype=np.float64)[labels]
    wave = np.sin(2 * np.pi * freq[:, None] * coord[None, :] + phase[:, None]) * contrast[:, None]
    images = np.where(vertical[:, None, None], wave[:, None, :], wave[:, :, None])
    images = np.broadcast_to(images[..., None], (n, size, size, channels)).copy()
    images += noise * rng.standard_normal(images.shape)
    names = [f"freq{f}" for f in frequencies]
    return Dataset(images.astype(np.float32), labels.astype(np.int64), len(frequencies), names)


@dataclass
class DatasetManifest:
    root: Path
    image_size: int
    channels: int
    num_classes: int
    labels: list[str]
    mean: list[float]
    std: list[float]
    samples: list[tuple[str, int, str, int]]  # path, label, split, byte length

    @property
    def sample_count(self) -> int:
        return len(self.samples)

    def splits(self) -> list[str]:
        return sorted({s[2] for s in self.samples})

    def validate(self) -> None:
        expected = record_length("single", (self.image_size, self.image_size, self.channels))
        for rel, label, _, nbytes in self.samples:
            path = self.root / rel
            if not path.is_file():
                raise IngestionError(f"missing sample file: {path}")
            size = path.stat().st_size
            if size != nbytes:
                raise IngestionError(f"{path}: {size} bytes, manifest declares {nbytes}")
            if not 0 <= label < self.num_classes:
                raise IngestionError(f"{path}: label {label} outside 0..{self.num_classes - 1}")
            if nbytes not in (expected, record_length("double", (self.image_size, self.image_size, self.channels))):
                raise IngestionError(f"{path}: byte length {nbytes} does not fit a {self.image_size}x{self.image_size}x{self.channels} image")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    header: dict[str, str] = {}
    samples = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise IngestionError(f"{path}:{lineno}: expected 'key = value'")
        if key == "sample":
            parts = value.split()
            if len(parts) != 4:
                raise IngestionError(f"{path}:{lineno}: sample needs '<file> <label> <split> <bytes>'")
            samples.append((parts[0], int(parts[1]), parts[2], int(parts[3])))
        else:
            header[key] = value
    try:
        version = int(header.get("version", MANIFEST_VERSION))
        if version != MANIFEST_VERSION:
            raise IngestionError(f"{path}: unsupported manifest version {version}")
        channels = int(header["channels"])
        floats = lambda k, default: [float(v) for v in header.get(k, default).split(",")]  # noqa: E731
        m = DatasetManifest(
            root=(path.parent / header.get("root", ".")).resolve(),
            image_size=int(header["image_size"]),
            channels=channels,
            num_classes=int(header["num_classes"]),
            labels=header.get("labels", "").split(",") if header.get("labels") else [],
            mean=floats("mean", ",".join(["0"] * channels)),
            std=floats("std", ",".join(["1"] * channels)),
            samples=samples,
        )
    except KeyError as exc:
        raise IngestionError(f"{path}: missing header key {exc}") from None
    if "sample_count" in header and int(header["sample_count"]) != len(samples):
        raise IngestionError(f"{path}: sample_count {header['sample_count']} but {len(samples)} sample lines")
    return m


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    lines = [
        f"version = {MANIFEST_VERSION}",
        f"root = {Path(os.path.relpath(manifest.root.resolve(), path.parent.resolve())).as_posix()}",
        f"image_size = {manifest.image_size}",
        f"channels = {manifest.channels}",
        f"num_classes = {manifest.num_classes}",
        f"labels = {','.join(manifest.labels)}",
        f"mean = {','.join(repr(float(v)) for v in manifest.mean)}",
        f"std = {','.join(repr(float(v)) for v in manifest.std)}",
        f"sample_count = {manifest.sample_count}",
    ]
    lines += [f"sample = {rel} {label} {split} {nbytes}" for rel, label, split, nbytes in manifest.samples]
    path.write_text("\n".join(lines) + "\n")


def export_dataset(ds: Dataset, directory, split: str = "train", mean=None, std=None) -> Path:
    """Write ``ds`` as tensor files plus ``manifest.txt`` under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    channels = ds.images.shape[-1]
    samples = []
    for k, (img, label) in enumerate(ds):
        rel = f"{split}_{k:06d}.tensor"
        save_tensor(directory / rel, img.astype(np.float32))
        samples.append((rel, label, split, (directory / rel).stat().st_size))
    manifest = DatasetManifest(
        root=directory.resolve(),
        image_size=ds.images.shape[1],
        channels=channels,
        num_classes=ds.num_classes,
        labels=list(ds.label_names),
        mean=list(mean) if mean is not None else [0.0] * channels,
        std=list(std) if std is not None else [1.0] * channels,
        samples=samples,
    )
    path = directory / "manifest.txt"
    write_manifest(path, manifest)
    return path


def load_dataset(manifest: DatasetManifest | str | Path, split: str | None = None) -> Dataset:
    """Read every sample (optionally one split), normalized per channel."""
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    manifest.validate()
    chosen = [s for s in manifest.samples if split is None or s[2] == split]
    images, labels = [], []
    for rel, label, _, _ in chosen:
        path = manifest.root / rel
        try:
            t = load_tensor(path)
        except (SerializationError, OSError) as exc:
            raise IngestionError(f"corrupt sample file {path}: {exc}") from None
        if t.shape != (manifest.image_size, manifest.image_size, manifest.channels):
            raise IngestionError(f"{path}: shape {t.shape} does not match manifest")
        images.append(t.data.astype(np.float32))
        labels.append(label)
    if not images:
        arr = np.zeros((0, manifest.image_size, manifest.image_size, manifest.channels), dtype=np.float32)
    else:
        arr = np.stack(images)
    mean = np.asarray(manifest.mean, dtype=np.float32)
    std = np.asarray(manifest.std, dtype=np.float32)
    arr = (arr - mean) / std
    return Dataset(arr.astype(np.float32), np.asarray(labels, dtype=np.int64), manifest.num_classes, manifest.labels)
