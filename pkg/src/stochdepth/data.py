"""Desk-scale datasets, standardization, augmentation and split handling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensor import RngStream

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Inputs, integer labels and a split tag per sample."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    splits: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        if len(self.inputs) != n or len(self.splits) != n:
            raise DatasetError("inputs, labels and split tags must have equal length")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")
        bad = set(np.unique(self.splits)) - set(SPLITS)
        if bad:
            raise DatasetError(f"unknown split tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_arrays(cls, inputs, labels, num_classes: int, split: str = "train") -> "Dataset":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(np.asarray(inputs, dtype=np.float64), labels, num_classes, np.full(len(labels), split))

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.splits == name
        return self.inputs[mask], self.labels[mask]

    def count(self, name: str) -> int:
        return int(np.sum(self.splits == name))

    def concat(self, other: "Dataset") -> "Dataset":
        if other.inputs.shape[1:] != self.inputs.shape[1:]:
            raise DatasetError("cannot concatenate datasets with different sample shapes")
        return Dataset(
            np.concatenate([self.inputs, other.inputs]),
            np.concatenate([self.labels, other.labels]),
            max(self.num_classes, other.num_classes),
            np.concatenate([self.splits, other.splits]),
        )

    def retag(self, split: str) -> "Dataset":
        return replace(self, splits=np.full(len(self), split))


def make_spirals(n_per_class: int, classes: int, noise_sigma: float, rng: RngStream, turns: float = 1.0) -> Dataset:
    """Interleaved 2-D spiral arms, one per class, with Gaussian noise.

    Radius grows linearly from 0.1 to 1 along each arm; the arms are rotated
    copies of each other.
    """
    if classes < 2:
        raise DatasetError("need at least two classes")
    t = np.linspace(0.0, 1.0, n_per_class)
    r = 0.1 + 0.9 * t
    xs, ys = [], []
    for k in range(classes):
        theta = 2 * math.pi * (k / classes + turns * t)
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        xs.append(pts)
        ys.append(np.full(n_per_class, k))
    x = np.concatenate(xs)
    if noise_sigma > 0:
        x = x + rng.normal(noise_sigma, x.shape)
    return Dataset.from_arrays(x, np.concatenate(ys), classes)


def load_image_csv(path: str | Path, shape: tuple[int, int, int], num_classes: int = 10) -> Dataset:
    """Read ``label,p0,p1,...`` rows with pixel values in [0, 255].

    Pixels are scaled to [0, 1] and reshaped to ``C x H x W``.
    """
    n_pix = math.prod(shape)
    inputs, labels = [], []
    with open(path, newline="") as fh:
        for rownum, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != n_pix + 1:
                raise DatasetError(f"row {rownum}: expected {n_pix + 1} fields, got {len(row)}")
            try:
                label = int(row[0])
                pix = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DatasetError(f"row {rownum}: malformed value ({exc})") from None
            if not 0 <= label < num_classes:
                raise DatasetError(f"row {rownum}: label {label} outside [0, {num_classes})")
            if any(not 0 <= p <= 255 for p in pix):
                raise DatasetError(f"row {rownum}: pixel value outside [0, 255]")
            labels.append(label)
            inputs.append(pix)
    x = np.asarray(inputs, dtype=np.float64).reshape((len(labels), *shape)) / 255.0
    return Dataset.from_arrays(x, labels, num_classes)


def _channel_axes(x: np.ndarray):
    return (0, 2, 3) if x.ndim == 4 else (0,)


def standardize(ds: Dataset, eps: float = 1e-12):
    """Shift and scale every channel with statistics of the train split only."""
    x_tr, _ = ds.split("train")
    if len(x_tr) == 0:
        raise DatasetError("cannot standardize without training samples")
    axes = _channel_axes(x_tr)
    mean = x_tr.mean(axis=axes)
    std = x_tr.std(axis=axes)
    std = np.where(std > eps, std, 1.0)
    shape = (1, -1, 1, 1) if x_tr.ndim == 4 else (1, -1)
    x = (ds.inputs - mean.reshape(shape)) / std.reshape(shape)
    return replace(ds, inputs=x), mean, std


@dataclass(frozen=True)
class AugmentConfig:
    hflip: bool = False
    translate_pixels: int = 0

    def __post_init__(self):
        if self.translate_pixels < 0:
            raise ValueError("translate_pixels must be >= 0")

    @property
    def enabled(self) -> bool:
        return self.hflip or self.translate_pixels > 0


def augment_minibatch(batch: np.ndarray, cfg: AugmentConfig, rng: RngStream) -> np.ndarray:
    """Random horizontal flips and zero-padded random crops, per image."""
    if not cfg.enabled:
        return batch
    if batch.ndim != 4:
        raise ValueError(f"augmentation expects B x C x H x W, got {batch.shape}")
    b, _, h, w = batch.shape
    t = cfg.translate_pixels
    if t >= min(h, w):
        raise ValueError(f"translate_pixels {t} must be below image size {h}x{w}")
    out = batch
    if cfg.hflip:
        flip = rng.uniform01(b) < 0.5
        out = np.where(flip[:, None, None, None], batch[..., ::-1], batch)
    if t:
        offsets = rng.integers(0, 2 * t + 1, (b, 2))
        padded = np.pad(out, ((0, 0), (0, 0), (t, t), (t, t)))
        out = np.empty_like(batch)
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


def holdout_split(ds: Dataset, val_fraction: float, rng: RngStream) -> Dataset:
    """Move a shuffled ``val_fraction`` of the train split to ``val``."""
    if not 0 < val_fraction < 1:
        raise DatasetError("val_fraction must lie in (0, 1)")
    train_idx = np.flatnonzero(ds.splits == "train")
    n_val = int(round(len(train_idx) * val_fraction))
    if n_val == 0 or n_val == len(train_idx):
        raise DatasetError(f"split of {len(train_idx)} samples at {val_fraction} leaves an empty side")
    perm = rng.permutation(len(train_idx))
    splits = ds.splits.copy()
    splits[train_idx[perm[:n_val]]] = "val"
    return replace(ds, splits=splits)
