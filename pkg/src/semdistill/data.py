"""Procedural 10-class 32x32 image dataset and the shared augmentation.

Each class owns a smooth color texture (a few oriented gratings plus a blob).
Classes come in correlated pairs, and every image also carries a weaker copy
of a second class's texture, so a good teacher's probabilities say more than
the hard label does.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataError


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N,) int64
    sample_ids: np.ndarray  # (N,) uint64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.uint64)
        if not len(self.images) == len(self.labels) == len(self.sample_ids):
            raise DataError("images, labels and sample_ids differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx) -> "ImageDataset":
        idx = np.asarray(idx)
        return ImageDataset(self.images[idx], self.labels[idx], self.sample_ids[idx])

    def head(self, n: int) -> "ImageDataset":
        """First ``n`` samples; heads of one dataset are nested."""
        return self.subset(np.arange(min(n, len(self))))

    def fraction(self, frac: float) -> "ImageDataset":
        return self.head(max(1, int(round(frac * len(self)))))

    def save(self, path) -> None:
        np.savez(path, images=self.images, labels=self.labels, sample_ids=self.sample_ids)

    @classmethod
    def load(cls, path) -> "ImageDataset":
        try:
            with np.load(path) as z:
                return cls(z["images"], z["labels"], z["sample_ids"])
        except (OSError, KeyError) as exc:
            raise DataError(f"cannot load dataset {path}: {exc}") from exc


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 10
    size: int = 32
    gratings: int = 3
    pair_correlation: float = 0.8
    distractor_max: float = 0.8
    max_shift: int = 4
    clutter: float = 1.0
    pixel_noise: float = 1.5
    seed: int = 2024


def _smooth_field(rng, size, cutoff=4):
    f = np.zeros((3, size, size), dtype=np.complex128)
    f[:, :cutoff, :cutoff] = rng.normal(size=(3, cutoff, cutoff)) + 1j * rng.normal(size=(3, cutoff, cutoff))
    field = np.fft.ifft2(f).real
    return field / field.std()


def class_templates(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s] / s
    temps = []
    for _ in range(spec.num_classes):
        t = np.zeros((3, s, s))
        for _ in range(spec.gratings):
            theta = rng.uniform(0, np.pi)
            freq = rng.integers(1, 5)
            phase = rng.uniform(0, 2 * np.pi)
            color = rng.normal(size=3)
            wave = np.cos(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
            t += color[:, None, None] * wave
        cy, cx = rng.uniform(0.25, 0.75, size=2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.12 ** 2))
        t += 2 * rng.normal(size=3)[:, None, None] * blob
        temps.append(t / t.std())
    temps = np.stack(temps)
    # odd classes lean on their even neighbour
    rho = spec.pair_correlation
    for c in range(1, spec.num_classes, 2):
        mixed = rho * temps[c - 1] + np.sqrt(1 - rho ** 2) * temps[c]
        temps[c] = mixed / mixed.std()
    return temps.astype(np.float32)


def _roll(img, dy, dx, flip):
    out = np.roll(img, (dy, dx), axis=(1, 2))
    return out[:, :, ::-1] if flip else out


def synth_dataset(n: int, spec: SynthSpec = SynthSpec(), split_seed: int = 0,
                  id_offset: int = 0) -> ImageDataset:
    """Draw ``n`` labelled images; ``split_seed`` separates train/test pools."""
    temps = class_templates(spec)
    rng = np.random.default_rng([spec.seed, 1, split_seed])
    c = spec.num_classes
    labels = rng.integers(0, c, size=n)
    images = np.empty((n, 3, spec.size, spec.size), dtype=np.float32)
    m = spec.max_shift
    for i, y in enumerate(labels):
        other = (y + rng.integers(1, c)) % c
        amp = rng.uniform(0.7, 1.3)
        mix = rng.uniform(0, spec.distractor_max)
        img = amp * _roll(temps[y], *rng.integers(-m, m + 1, size=2), rng.random() < 0.5)
        img = img + mix * _roll(temps[other], *rng.integers(-m, m + 1, size=2), rng.random() < 0.5)
        img = img + spec.clutter * _smooth_field(rng, spec.size, cutoff=6)
        img = img + spec.pixel_noise * rng.normal(size=img.shape)
        images[i] = img
    ids = np.arange(id_offset, id_offset + n, dtype=np.uint64)
    return ImageDataset(images, labels, ids)


def make_splits(n_train: int, n_test: int, n_teacher: int = 0, spec: SynthSpec = SynthSpec()):
    """Disjoint train / test / teacher-pretraining sets with globally unique ids."""
    train = synth_dataset(n_train, spec, split_seed=1, id_offset=0)
    test = synth_dataset(n_test, spec, split_seed=2, id_offset=1_000_000)
    teacher = synth_dataset(n_teacher, spec, split_seed=3, id_offset=2_000_000) if n_teacher else None
    return train, test, teacher


def save_dataset_dir(path, **splits) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        if ds is not None:
            ds.save(path / f"{name}.npz")
    return path


def load_split(path, split: str) -> ImageDataset:
    path = Path(path)
    f = path / f"{split}.npz" if path.is_dir() else path
    if not f.exists():
        raise DataError(f"dataset split {split!r} not found at {f}")
    return ImageDataset.load(f)


def augment(batch: torch.Tensor, rng: torch.Generator, pad: int = 2) -> torch.Tensor:
    """Random crop after zero padding, then random horizontal flip."""
    b, _, h, w = batch.shape
    padded = torch.nn.functional.pad(batch, (pad, pad, pad, pad))
    offs = torch.randint(0, 2 * pad + 1, (b, 2), generator=rng)
    flips = torch.rand(b, generator=rng) < 0.5
    out = torch.empty_like(batch)
    for i in range(b):
        dy, dx = int(offs[i, 0]), int(offs[i, 1])
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop.flip(-1) if flips[i] else crop
    return out
