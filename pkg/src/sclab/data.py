"""Synthetic two-class 2D data, labeled/unlabeled splits and CSV persistence.

CSV layout: header ``x,y,label``; label is an integer or empty (unlabeled).
Floats are written with ``repr`` so a save/load round trip is exact.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ParseError
from .models import GmmSpec

UNLABELED = -1

GRID_BOX = (-12.0, 12.0, -8.0, 8.0)

CLASS0_MEANS = [(-8.0, -4.0), (-2.5, 4.0), (3.0, -4.0), (8.5, 4.0)]
CLASS1_MEANS = [(-8.5, 4.0), (-3.0, -4.0), (2.5, 4.0), (8.0, -4.0)]


def isotropic_gmm(class_means, std, priors=None):
    k = len(class_means)
    cov = std**2 * np.eye(2)
    comps = [[(np.array(m, dtype=float), cov, 1.0 / len(ms)) for m in ms] for ms in class_means]
    priors = np.full(k, 1.0 / k) if priors is None else priors
    return GmmSpec(comps, priors)


def default_toy_gmm(std=0.8):
    """Two interleaved classes of four isotropic clusters each."""
    return isotropic_gmm([CLASS0_MEANS, CLASS1_MEANS], std)


def symmetric_two_class_gmm(offset=2.0, std=0.8):
    """One cluster per class at (-offset, 0) and (+offset, 0)."""
    return isotropic_gmm([[(-offset, 0.0)], [(offset, 0.0)]], std)


@dataclass
class Dataset:
    x: np.ndarray        # (N, 2) float64
    labels: np.ndarray   # (N,) int, UNLABELED for missing labels

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.x) != len(self.labels):
            raise ValueError("points and labels differ in length")

    def __len__(self):
        return len(self.x)

    @property
    def labeled_mask(self):
        return self.labels != UNLABELED

    def by_class(self, n_classes):
        return [self.x[self.labels == y] for y in range(n_classes)]

    def __eq__(self, other):
        return (isinstance(other, Dataset) and np.array_equal(self.x, other.x)
                and np.array_equal(self.labels, other.labels))

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros(0, dtype=np.int64))


@dataclass
class ToyDatasetSpec:
    gmm: GmmSpec
    n_train: int = 2000
    n_test: int = 2000
    labeled_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if self.n_labeled < 1:
            raise ValueError("labeled_fraction * n_train must be at least 1")
        x0, x1, y0, y1 = GRID_BOX
        m = self.gmm.means
        if np.any(m[:, 0] < x0) or np.any(m[:, 0] > x1) or np.any(m[:, 1] < y0) \
                or np.any(m[:, 1] > y1):
            raise ValueError("component means must lie inside the evaluation grid box")

    @property
    def n_labeled(self):
        return int(round(self.labeled_fraction * self.n_train))


def make_toy_dataset(spec: ToyDatasetSpec):
    """Draw train and test sets; strip labels from a random part of train.

    Returns ``(labeled, unlabeled, test)``.
    """
    rng = np.random.default_rng(spec.seed)
    x, y = spec.gmm.sample(spec.n_train + spec.n_test, rng)
    xtr, ytr = x[:spec.n_train], y[:spec.n_train]
    keep = np.zeros(spec.n_train, dtype=bool)
    keep[rng.choice(spec.n_train, size=spec.n_labeled, replace=False)] = True
    labeled = Dataset(xtr[keep], ytr[keep])
    unlabeled = Dataset(xtr[~keep], np.full((~keep).sum(), UNLABELED))
    test = Dataset(x[spec.n_train:], y[spec.n_train:])
    return labeled, unlabeled, test


def save_dataset(path, data: Dataset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "label"])
        for (a, b), lab in zip(data.x, data.labels):
            w.writerow([repr(float(a)), repr(float(b)), "" if lab == UNLABELED else str(int(lab))])


def load_dataset(path) -> Dataset:
    pts, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x", "y", "label"]:
            raise ParseError(f"expected header x,y,label, got {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=lineno)
            try:
                a, b = float(row[0]), float(row[1])
                lab = UNLABELED if row[2].strip() == "" else int(row[2])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if lab < 0 and row[2].strip() != "":
                raise ParseError("labels must be non-negative", line=lineno)
            pts.append((a, b))
            labels.append(lab)
    if not pts:
        return Dataset.empty()
    return Dataset(np.array(pts), np.array(labels))
