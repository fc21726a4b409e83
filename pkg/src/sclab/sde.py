"""Variance-exploding SDE: noise schedule, perturbation kernel and PC sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergedError, DomainError

# training draws t from [TRAIN_T_EPS, T] to stay off the sigma_min cliff
TRAIN_T_EPS = 1e-3


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric sigma(t) = sigma_min * (sigma_max / sigma_min) ** t on [0, T]."""

    sigma_min: float = 0.01
    sigma_max: float = 12.0
    T: float = 1.0
    weighting: str = "sigma-squared"

    def __post_init__(self):
        if not self.sigma_min > 0:
            raise DomainError("sigma_min must be positive")
        if not self.sigma_max > self.sigma_min:
            raise DomainError("sigma_max must exceed sigma_min")
        if self.T != 1.0:
            raise DomainError("horizon T is fixed at 1.0")
        if self.weighting != "sigma-squared":
            raise DomainError(f"unknown weighting rule {self.weighting!r}")

    @property
    def log_ratio(self):
        return math.log(self.sigma_max / self.sigma_min)

    def _check(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.T) or not np.all(np.isfinite(t)):
            raise DomainError(f"t must lie in [0, {self.T}]")
        return t

    def sigma(self, t):
        t = self._check(t)
        s = self.sigma_min * (self.sigma_max / self.sigma_min) ** t
        # pin endpoints exactly
        s = np.where(t == 0, self.sigma_min, np.where(t == self.T, self.sigma_max, s))
        return s if s.ndim else float(s)

    def g2(self, t):
        """Diffusion coefficient squared, d sigma(t)^2 / dt."""
        return 2.0 * self.log_ratio * np.square(self.sigma(t))

    def weight(self, t):
        """Loss weighting lambda(t) = sigma(t)^2."""
        return np.square(self.sigma(t))


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 1000
    corrector_snr: float = 0.1
    corrector_steps_per_level: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise DomainError("n_steps must be >= 1")
        if not 0 < self.corrector_snr < 1:
            raise DomainError("corrector_snr must lie in (0, 1)")
        if self.corrector_steps_per_level < 0:
            raise DomainError("corrector_steps_per_level must be >= 0")


def sigma(schedule: NoiseSchedule, t):
    return schedule.sigma(t)


def perturb(schedule: NoiseSchedule, x0, t, noise):
    """x0 + sigma(t) * noise; ``t`` scalar or one value per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    s = np.asarray(schedule.sigma(t))
    if s.ndim == 1:
        s = s[:, None]
    return x0 + s * np.asarray(noise, dtype=np.float64)


def kernel_score(schedule: NoiseSchedule, x_t, x0, t):
    """Score of N(x_t; x0, sigma(t)^2 I) with respect to x_t."""
    s = np.asarray(schedule.sigma(t))
    if s.ndim == 1:
        s = s[:, None]
    return (np.asarray(x0, dtype=np.float64) - np.asarray(x_t, dtype=np.float64)) / s**2


def sample_times(rng, n, schedule: NoiseSchedule, eps=TRAIN_T_EPS):
    return rng.uniform(eps, schedule.T, size=n)


def langevin_corrector_step(score_fn, x, t, snr, rng):
    """One annealed-Langevin step with step size set from the target SNR.

    Norms are averaged over the batch, so chains in one call share a step size.
    """
    grad = score_fn(x, t)
    z = rng.standard_normal(x.shape)
    grad_norm = np.mean(np.linalg.norm(grad, axis=-1))
    if grad_norm == 0:
        return x
    noise_norm = np.mean(np.linalg.norm(z, axis=-1))
    with np.errstate(invalid="ignore", over="ignore"):
        step = 2.0 * (snr * noise_norm / grad_norm) ** 2
        return x + step * grad + np.sqrt(2.0 * step) * z


def pc_sample(score_fn, config: SamplerConfig, schedule: NoiseSchedule, n_samples: int,
              dim: int = 2):
    """Predictor-corrector sampling of the reverse VE-SDE from t=T down to t=0.

    ``score_fn(x, t)`` takes points (n, dim) and a scalar time.  Each
    Euler-Maruyama predictor step is followed by
    ``config.corrector_steps_per_level`` Langevin corrector steps at the new
    noise level.
    """
    rng = np.random.default_rng(config.seed)
    x = schedule.sigma_max * rng.standard_normal((n_samples, dim))
    times = np.linspace(schedule.T, 0.0, config.n_steps + 1)
    for i in range(config.n_steps):
        t, t_next = times[i], times[i + 1]
        dt = t - t_next
        g2 = schedule.g2(t)
        with np.errstate(invalid="ignore", over="ignore"):
            x = x + g2 * score_fn(x, t) * dt + math.sqrt(g2 * dt) * rng.standard_normal(x.shape)
        for _ in range(config.corrector_steps_per_level):
            x = langevin_corrector_step(score_fn, x, t_next, config.corrector_snr, rng)
        if not np.all(np.isfinite(x)):
            raise DivergedError(f"non-finite sample at step {i}", step=i)
    return x


def write_samples_csv(path, points, labels=None):
    from .data import Dataset, UNLABELED, save_dataset
    points = np.asarray(points, dtype=np.float64)
    labels = np.full(len(points), UNLABELED) if labels is None else labels
    save_dataset(path, Dataset(points, labels))
