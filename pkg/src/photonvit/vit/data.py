"""Synthetic image classification sets and a small CSV image format."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..core_math import SeedContext
from ..errors import ParameterError


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


def class_templates(ctx: SeedContext, n_classes, image_size, blobs_per_class=3, blob_width=None):
    """One unit-peak template per class, built from a few Gaussian blobs."""
    rng = ctx.generator()
    width = image_size / 8 if blob_width is None else blob_width
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    templates = np.zeros((n_classes, image_size, image_size))
    for c in range(n_classes):
        for _ in range(blobs_per_class):
            cy, cx = rng.uniform(0, image_size, size=2)
            sign = rng.choice([-1.0, 1.0])
            templates[c] += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
        templates[c] /= np.max(np.abs(templates[c]))
    return templates


def make_synthetic_dataset(ctx: SeedContext, n_classes=4, n_per_class=100, image_size=32,
                           separation=1.0, templates=None):
    """Class-conditional images ``separation * template_c + N(0, 1)`` pixel noise.

    Templates come from ``ctx/templates``, so train and test sets drawn with
    different ``ctx/split`` children share them when built from the same
    ``ctx`` via :func:`make_split`.
    """
    if n_classes < 2 or n_per_class < 1:
        raise ParameterError("need at least two classes and one sample per class")
    if templates is None:
        templates = class_templates(ctx.child("templates"), n_classes, image_size)
    rng = ctx.child("samples").generator()
    labels = np.repeat(np.arange(n_classes), n_per_class)
    noise = rng.standard_normal((len(labels), image_size, image_size))
    images = separation * templates[labels] + noise
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], n_classes)


def make_split(ctx: SeedContext, n_classes=4, n_train=100, n_test=100, image_size=32, separation=1.0):
    """Train and test sets drawn around shared class templates."""
    templates = class_templates(ctx.child("templates"), n_classes, image_size)
    train = make_synthetic_dataset(ctx.child("split", 0), n_classes, n_train, image_size, separation, templates)
    test = make_synthetic_dataset(ctx.child("split", 1), n_classes, n_test, image_size, separation, templates)
    return train, test


def save_dataset_csv(path, ds: Dataset):
    """One row per image: ``label, height, width, pixels...`` (row-major)."""
    n, h, w = ds.images.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for img, lab in zip(ds.images, ds.labels):
            writer.writerow([int(lab), h, w] + [f"{v:.17g}" for v in img.ravel()])


def load_dataset_csv(path, n_classes=None):
    images, labels = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                lab, h, w = int(row[0]), int(row[1]), int(row[2])
                px = np.array([float(v) for v in row[3:]], dtype=np.float64)
            except ValueError as exc:
                raise ParameterError(f"{path}:{lineno}: {exc}") from None
            if px.size != h * w or not np.all(np.isfinite(px)):
                raise ParameterError(f"{path}:{lineno}: expected {h * w} finite pixels")
            images.append(px.reshape(h, w))
            labels.append(lab)
    labels = np.array(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    return Dataset(np.stack(images), labels, k)
