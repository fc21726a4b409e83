"""Optimization loops for the score network, the classifier and the
conditional (classifier-free) score network."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .data import UNLABELED, Dataset
from .errors import NoLabeledDataError, NumericalOverflowError, TrainingDivergedError
from .losses import (LossWeights, SGLDConfig, classifier_loss_terms, cond_dsm_loss, dsm_loss,
                     make_batch)
from .models import NetParams, init_params
from .sde import NoiseSchedule, sample_times

LR_DECAYS = ("none", "cosine")
STREAMS = ("init", "batch", "time", "noise", "sgld", "dropout")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    steps: int = 3000
    learning_rate: float = 2e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    labeled_fraction: float = 1.0
    eval_every: int = 100
    lr_decay: str = "none"

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be a positive even integer")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if not 0 < self.labeled_fraction <= 1:
            raise ValueError("labeled_fraction must lie in (0, 1]")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.lr_decay not in LR_DECAYS:
            raise ValueError(f"lr_decay must be one of {LR_DECAYS}")

    def lr_at(self, step):
        """Learning rate used for 1-based ``step``; cosine anneals to zero at ``steps``."""
        if self.lr_decay == "cosine":
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / self.steps))
        return self.learning_rate


@dataclass(frozen=True)
class ModelShape:
    hidden: int = 128
    depth: int = 3
    data_scale: float = 1.0


def named_streams(seed):
    """Independent generators per purpose, all derived from one root seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(c) for name, c in zip(STREAMS, children)}


class Adam:
    def __init__(self, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {}
        self.v = {}
        self.t = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig):
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m.get(k, 0.0) * self.beta1 + (1.0 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def append(self, step, terms, wall_ms):
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("step index must increase")
        rec = {"step": int(step)}
        rec.update({k: float(v) for k, v in terms.items()})
        rec["wall_ms"] = float(wall_ms)
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([r.get(name, np.nan) for r in self.records])

    def write_jsonl(self, path, mode="w"):
        with open(path, mode) as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")


def compose_batch(labeled: Dataset, unlabeled: Dataset, batch_size: int, rng):
    """Half labeled, half unlabeled draws.

    Returns ``(x_l, y_l, x_full, y_full)``; the full batch is the labeled half
    followed by the unlabeled half.  With no unlabeled data both halves come
    from the labeled pool (and keep their labels).
    """
    if len(labeled) == 0:
        raise NoLabeledDataError("labeled pool is empty")
    if batch_size % 2:
        raise ValueError("batch_size must be even")
    half = batch_size // 2

    def draw(pool):
        replace = len(pool) < half
        return rng.choice(len(pool), size=half, replace=replace)

    il = draw(labeled)
    x_l, y_l = labeled.x[il], labeled.labels[il]
    pool = unlabeled if len(unlabeled) else labeled
    iu = draw(pool)
    x_u, y_u = pool.x[iu], pool.labels[iu]
    return x_l, y_l, np.concatenate([x_l, x_u]), np.concatenate([y_l, y_u])


def _perturbed(schedule, x, y, streams):
    t = sample_times(streams["time"], len(x), schedule)
    noise = streams["noise"].standard_normal(x.shape)
    return make_batch(schedule, x, y, t, noise)


def _optimize(params: NetParams, loss_terms_fn, cfg: TrainConfig, streams, log=None,
              on_eval=None):
    """Shared Adam loop; ``loss_terms_fn(params, step)`` returns a dict of Vars.

    ``on_eval(step, params)`` is called every ``cfg.eval_every`` steps.
    """
    log = log if log is not None else RunLog()
    opt = Adam.from_config(cfg)
    trainable = {k: np.asarray(v) for k, v in params.trainable().items()}
    last_good = params.copy()
    for step in range(1, cfg.steps + 1):
        t0 = time.perf_counter()
        terms_out = {}

        def loss(wrapped):
            terms = loss_terms_fn(params.with_arrays(wrapped), step)
            total = None
            for k, v in terms.items():
                terms_out[k] = float(dm.value_of(v))
                total = v if total is None else dm.add(total, v)
            return total

        try:
            value, grads = dm.param_gradient(loss, trainable)
        except NumericalOverflowError as exc:
            raise TrainingDivergedError(f"step {step}: {exc}", params=last_good, log=log,
                                        step=step) from exc
        if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergedError(f"non-finite loss at step {step}", params=last_good,
                                        log=log, step=step)
        opt.lr = cfg.lr_at(step)
        trainable = opt.step(trainable, grads)
        params = params.with_arrays(trainable)
        terms_out["loss"] = value
        log.append(step, terms_out, 1e3 * (time.perf_counter() - t0))
        if step % cfg.eval_every == 0:
            last_good = params.copy()
            if on_eval is not None:
                on_eval(step, params)
    return params, log


def train_score(cfg: TrainConfig, schedule: NoiseSchedule, all_data, shape=ModelShape(),
                on_eval=None):
    """Unconditional DSM training on every point (labels ignored)."""
    x = all_data.x if isinstance(all_data, Dataset) else np.asarray(all_data, dtype=np.float64)
    streams = named_streams(cfg.seed)
    params = init_params("score", streams["init"], hidden=shape.hidden, depth=shape.depth,
                         data_scale=shape.data_scale, schedule=schedule)

    def terms(p, step):
        idx = streams["batch"].integers(0, len(x), size=cfg.batch_size)
        batch = _perturbed(schedule, x[idx], None, streams)
        return {"dsm": dsm_loss(p, batch)}

    return _optimize(params, terms, cfg, streams, on_eval=on_eval)


def train_classifier(cfg: TrainConfig, schedule: NoiseSchedule, labeled: Dataset,
                     unlabeled: Dataset, weights: LossWeights, shape=ModelShape(),
                     n_classes=2, score_params=None, sc_data="all", sgld_cfg=None,
                     on_eval=None):
    """Classifier training with half-labeled batches.

    Cross-entropy uses the labeled half; self-calibration uses the whole batch
    (``sc_data="all"``) or only its labeled elements (``"labeled"``).
    """
    if sc_data not in ("all", "labeled"):
        raise ValueError("sc_data must be 'all' or 'labeled'")
    if len(labeled) == 0:
        raise NoLabeledDataError("labeled pool is empty")
    streams = named_streams(cfg.seed)
    params = init_params("classifier", streams["init"], n_classes=n_classes,
                         hidden=shape.hidden, depth=shape.depth,
                         data_scale=shape.data_scale, schedule=schedule)
    sgld_cfg = sgld_cfg or SGLDConfig()
    half = cfg.batch_size // 2

    def terms(p, step):
        _, _, xf, yf = compose_batch(labeled, unlabeled, cfg.batch_size, streams["batch"])
        batch_all = _perturbed(schedule, xf, yf, streams)
        mask = np.zeros(len(batch_all), dtype=bool)
        mask[:half] = True
        batch_l = batch_all.subset(mask)
        batch_sc = batch_all if sc_data == "all" else batch_all.subset(batch_all.labeled_mask)
        return classifier_loss_terms(p, batch_l, batch_sc, weights, score_params,
                                     sgld_cfg, streams["sgld"])

    return _optimize(params, terms, cfg, streams, on_eval=on_eval)


def train_cond_score(cfg: TrainConfig, schedule: NoiseSchedule, labeled: Dataset,
                     unlabeled: Dataset, mode: str, shape=ModelShape(), n_classes=2,
                     p_uncond=0.1, on_eval=None):
    """Conditional score network for the ``cond`` / ``cfg-labeled`` / ``cfg-all`` baselines."""
    if mode not in ("cond", "cfg-labeled", "cfg-all"):
        raise ValueError(f"unknown mode {mode!r}")
    if len(labeled) == 0:
        raise NoLabeledDataError("labeled pool is empty")
    streams = named_streams(cfg.seed)
    params = init_params("cond_score", streams["init"], n_classes=n_classes,
                         hidden=shape.hidden, depth=shape.depth,
                         data_scale=shape.data_scale, schedule=schedule)

    def drop(y):
        if mode == "cond":
            return y
        mask = streams["dropout"].random(len(y)) < p_uncond
        return np.where(mask, UNLABELED, y)

    def terms(p, step):
        if mode == "cfg-all":
            x_l, y_l, xf, _ = compose_batch(labeled, unlabeled, cfg.batch_size, streams["batch"])
            half = len(x_l)
            y = np.concatenate([drop(y_l), np.full(len(xf) - half, UNLABELED)])
            x = xf
        else:
            idx = streams["batch"].integers(0, len(labeled), size=cfg.batch_size)
            x, y = labeled.x[idx], drop(labeled.labels[idx])
        batch = _perturbed(schedule, x, y, streams)
        return {"dsm": cond_dsm_loss(p, batch)}

    return _optimize(params, terms, cfg, streams, on_eval=on_eval)
