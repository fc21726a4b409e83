"""Gradient-field comparison, 2D sample-quality metrics and calibration error."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import (EmptyTestSetError, GridMismatchError, InsufficientSamplesError,
                     KTooLargeError)
from .models import all_posterior_log_grads, gmm_oracle_scores, internal_score, posterior

COS_EPS = 1e-12


@dataclass(frozen=True)
class GridSpec:
    x_min: float = -12.0
    x_max: float = 12.0
    y_min: float = -8.0
    y_max: float = 8.0
    step: float = 0.5

    def _axis(self, lo, hi):
        n = int(round((hi - lo) / self.step)) + 1
        return lo + self.step * np.arange(n)

    @property
    def xs(self):
        return self._axis(self.x_min, self.x_max)

    @property
    def ys(self):
        return self._axis(self.y_min, self.y_max)

    @property
    def n_nodes(self):
        return len(self.xs) * len(self.ys)

    def points(self):
        """Nodes in row-major order (y outer, x inner), shape (N, 2)."""
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


@dataclass
class GradientField:
    grid: GridSpec
    vectors: np.ndarray   # (K, N, 2)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3 or self.vectors.shape[1:] != (self.grid.n_nodes, 2):
            raise GridMismatchError("vector array does not match the grid")

    @property
    def n_classes(self):
        return self.vectors.shape[0]

    def __add__(self, other):
        _same_grid(self, other)
        return GradientField(self.grid, self.vectors + other.vectors)

    def to_csv(self, path):
        pts = self.grid.points()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "x", "y", "gx", "gy"])
            for k in range(self.n_classes):
                for (x, y), (gx, gy) in zip(pts, self.vectors[k]):
                    w.writerow([k, repr(float(x)), repr(float(y)), repr(float(gx)),
                                repr(float(gy))])


def _same_grid(a: GradientField, b: GradientField):
    if a.grid != b.grid or a.vectors.shape != b.vectors.shape:
        raise GridMismatchError("fields are defined on different grids")


def field_from_model(evaluator, grid: GridSpec, t=0.0) -> GradientField:
    """Evaluate ``evaluator(points, t) -> (K, N, 2)`` at every grid node."""
    vec = np.asarray(evaluator(grid.points(), t))
    if vec.ndim == 2:
        vec = vec[None]
    return GradientField(grid, vec)


# evaluators -----------------------------------------------------------------

def classifier_posterior_grads(params):
    return lambda pts, t: all_posterior_log_grads(params, pts, t)


def classifier_internal_score(params):
    return lambda pts, t: internal_score(params, pts, t)[None]


def oracle_posterior_grads(spec, schedule=None):
    return lambda pts, t: gmm_oracle_scores(spec, pts, t, schedule).posterior_grad


def oracle_cond_scores(spec, schedule=None):
    return lambda pts, t: gmm_oracle_scores(spec, pts, t, schedule).cond


def oracle_uncond_score(spec, schedule=None):
    return lambda pts, t: gmm_oracle_scores(spec, pts, t, schedule).uncond[None]


# field metrics ----------------------------------------------------------------

def cosine_stats(a, b):
    """Mean cosine similarity of paired vectors and the number of skipped pairs.

    Pairs where either vector has norm < 1e-12 are skipped.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na >= COS_EPS) & (nb >= COS_EPS)
    skipped = int((~ok).sum())
    if not ok.any():
        return float("nan"), skipped
    cos = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
    return float(np.mean(np.clip(cos, -1.0, 1.0))), skipped


def grad_field_metrics(estimated: GradientField, truth: GradientField):
    """(mean squared Euclidean error, mean cosine similarity) over nodes and classes."""
    _same_grid(estimated, truth)
    diff = estimated.vectors - truth.vectors
    mse = float(np.mean(np.sum(diff**2, axis=-1)))
    cs, _ = cosine_stats(estimated.vectors, truth.vectors)
    return mse, cs


def cond_score_cs(estimated_cond: GradientField, truth_cond: GradientField):
    """Mean cosine similarity of conditional-score fields.

    Build ``estimated_cond`` as oracle unconditional score + classifier
    posterior gradients (see :func:`conditional_field`).
    """
    _same_grid(estimated_cond, truth_cond)
    cs, _ = cosine_stats(estimated_cond.vectors, truth_cond.vectors)
    return cs


def conditional_field(posterior_grad_field: GradientField, uncond_field: GradientField):
    """Add a single unconditional field to each class's posterior gradient."""
    if uncond_field.grid != posterior_grad_field.grid:
        raise GridMismatchError("fields are defined on different grids")
    return GradientField(posterior_grad_field.grid,
                         posterior_grad_field.vectors + uncond_field.vectors[0][None])


# sample metrics -------------------------------------------------------------------

def _points(a, name):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    if len(a) < 2:
        raise InsufficientSamplesError(f"{name} set needs at least 2 points")
    return a


def trace_sqrt_product(s1, s2):
    """tr((s1 s2)^(1/2)) for 2x2 PSD matrices.

    The eigenvalues l1, l2 of s1 s2 are real and non-negative, and
    (sqrt(l1) + sqrt(l2))^2 = tr(s1 s2) + 2 sqrt(det(s1 s2)).
    """
    prod = s1 @ s2
    det = max(np.linalg.det(s1) * np.linalg.det(s2), 0.0)
    return math.sqrt(max(np.trace(prod) + 2.0 * math.sqrt(det), 0.0))


def frechet_2d(real, generated):
    """Fréchet distance between Gaussian fits of two 2D point sets."""
    r = _points(real, "real")
    g = _points(generated, "generated")
    mu_r, mu_g = r.mean(axis=0), g.mean(axis=0)
    cov_r, cov_g = np.cov(r, rowvar=False), np.cov(g, rowvar=False)
    val = float(np.sum((mu_r - mu_g) ** 2) + np.trace(cov_r) + np.trace(cov_g)
                - 2.0 * trace_sqrt_product(cov_r, cov_g))
    return max(val, 0.0)


def density_coverage(real, generated, k=5):
    """k-NN density and coverage of ``generated`` with respect to ``real``."""
    r = np.asarray(real, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(generated, dtype=np.float64).reshape(-1, 2)
    if len(r) <= k:
        raise KTooLargeError(f"need more than k={k} real points, got {len(r)}")
    if len(g) == 0:
        raise InsufficientSamplesError("generated set is empty")
    d_rr = cdist(r, r)
    # index k of each sorted row skips the zero self-distance
    radii = np.partition(d_rr, k, axis=1)[:, k]
    inside = cdist(r, g) <= radii[:, None]          # (R, G)
    density = float(inside.sum() / (k * len(g)))
    coverage = float(inside.any(axis=1).mean())
    return density, coverage


def intra_metrics(real_by_class, generated_by_class, metric="fd2", k=5):
    """Unweighted mean of a per-class metric.

    ``metric`` is one of ``fd2``, ``density``, ``coverage`` or a callable
    ``(real, generated) -> float``.
    """
    if len(real_by_class) != len(generated_by_class):
        raise ValueError("class counts differ")
    if callable(metric):
        fn = metric
    elif metric == "fd2":
        fn = frechet_2d
    elif metric == "density":
        def fn(r, g):
            return density_coverage(r, g, k)[0]
    elif metric == "coverage":
        def fn(r, g):
            return density_coverage(r, g, k)[1]
    else:
        raise ValueError(f"unknown metric {metric!r}")
    vals = [fn(r, g) for r, g in zip(real_by_class, generated_by_class)]
    return float(np.mean(vals))


def ece(confidences, correct, n_buckets=20):
    """Expected calibration error with equal-width confidence buckets.

    Bucket i holds confidences in [(i-1)/N, i/N); a confidence of exactly 1
    goes to the last bucket.
    """
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    corr = np.asarray(correct, dtype=np.float64).reshape(-1)
    if len(conf) == 0:
        raise EmptyTestSetError("no predictions")
    idx = np.minimum((conf * n_buckets).astype(int), n_buckets - 1)
    total = 0.0
    for b in range(n_buckets):
        sel = idx == b
        if sel.any():
            total += sel.sum() / len(conf) * abs(corr[sel].mean() - conf[sel].mean())
    return float(total)


def classifier_ece(params, test, n_buckets=20, t=0.0):
    """ECE of the classifier at time ``t`` on a labeled test set."""
    if len(test) == 0:
        raise EmptyTestSetError("test set is empty")
    p = posterior(params, test.x, t)
    return ece(p.max(axis=1), p.argmax(axis=1) == test.labels, n_buckets)


# reports --------------------------------------------------------------------------

METRIC_KEYS = ("grad_mse", "grad_cs", "cond_score_cs", "fd2", "intra_fd2", "density",
               "coverage", "intra_density", "intra_coverage", "ece")

_RANGES = {
    "grad_mse": (0.0, math.inf),
    "grad_cs": (-1.0, 1.0),
    "cond_score_cs": (-1.0, 1.0),
    "fd2": (0.0, math.inf),
    "intra_fd2": (0.0, math.inf),
    "density": (0.0, math.inf),
    "intra_density": (0.0, math.inf),
    "coverage": (0.0, 1.0),
    "intra_coverage": (0.0, 1.0),
    "ece": (0.0, 1.0),
}


@dataclass
class MetricsReport:
    values: dict

    def __post_init__(self):
        for k, v in self.values.items():
            if v is None or k not in _RANGES:
                continue
            lo, hi = _RANGES[k]
            if not (lo - 1e-12 <= v <= hi + 1e-12):
                raise ValueError(f"metric {k}={v} outside [{lo}, {hi}]")

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.values, fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls(json.load(fh))
