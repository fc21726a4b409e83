"""Sampling-time score composition.

Score sources may be :class:`~sclab.models.NetParams` or plain callables, so
the analytic mixture oracle can stand in for either network:

* unconditional score: ``fn(x, t) -> (N, 2)``
* classifier gradient: ``fn(x, y, t) -> (N, 2)`` returning ∇_x log p(y|x)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import (NetParams, cond_score_eval, gmm_oracle_scores, internal_score,
                     logit_grad, posterior_log_grad, score_net_eval)

LAMBDA_CG_SWEEP = (0.5, 0.8, 1.0, 1.2, 1.5, 2.0, 2.5)
LAMBDA_CFG_SWEEP = (0.0, 0.1, 0.2, 0.4)
MODES = ("cg", "cfg", "cond", "classifier-only-cond", "classifier-only-uncond")


@dataclass(frozen=True)
class GuidanceConfig:
    mode: str = "cg"
    lambda_cg: float = 1.0
    lambda_cfg: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}")
        if self.lambda_cg < 0 or self.lambda_cfg < 0:
            raise ValueError("guidance weights must be >= 0")


def _score_fn(score):
    if isinstance(score, NetParams):
        return lambda x, t: np.asarray(score_net_eval(score, x, t))
    return score


def _cls_grad_fn(classifier):
    if isinstance(classifier, NetParams):
        return lambda x, y, t: np.asarray(posterior_log_grad(classifier, x, y, t))
    return classifier


def oracle_score(spec, schedule=None):
    """Unconditional mixture score as a ``(x, t)`` callable."""
    return lambda x, t: gmm_oracle_scores(spec, np.atleast_2d(x), t, schedule).uncond


def oracle_classifier(spec, schedule=None):
    """Mixture ∇_x log p(y|x) as an ``(x, y, t)`` callable."""
    def fn(x, y, t):
        pg = gmm_oracle_scores(spec, np.atleast_2d(x), t, schedule).posterior_grad
        y = np.broadcast_to(np.asarray(y), (pg.shape[1],))
        return pg[y, np.arange(pg.shape[1])]
    return fn


def guided_score(score, classifier, x, y, t, lambda_cg):
    """s(x, t) + lambda_cg * ∇_x log p(y|x, t)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    s = _score_fn(score)(x, t)
    if lambda_cg == 0:
        return np.array(s, dtype=np.float64)
    return s + lambda_cg * _cls_grad_fn(classifier)(x, y, t)


def cfg_score(cond_params, x, y, t, lambda_cfg):
    """(1 + lambda_cfg) * s(x, y, t) - lambda_cfg * s(x, null, t)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    cond = np.asarray(cond_score_eval(cond_params, x, y, t))
    if lambda_cfg == 0:
        return cond
    null = np.asarray(cond_score_eval(cond_params, x, None, t))
    return (1.0 + lambda_cfg) * cond - lambda_cfg * null


def classifier_only_scores(cls_params, x, t, y=None):
    """Scores read off the classifier alone: ∇_x f_y, or the internal score if ``y`` is None."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if y is None:
        return np.asarray(internal_score(cls_params, x, t))
    return np.asarray(logit_grad(cls_params, x, y, t))


def make_score_fn(cfg: GuidanceConfig, y=None, score=None, classifier=None, cond=None):
    """Closure ``(x, t) -> (N, 2)`` for :func:`~sclab.sde.pc_sample`."""
    if cfg.mode == "cg":
        return lambda x, t: guided_score(score, classifier, x, y, t, cfg.lambda_cg)
    if cfg.mode == "cfg":
        return lambda x, t: cfg_score(cond, x, y, t, cfg.lambda_cfg)
    if cfg.mode == "cond":
        return lambda x, t: cfg_score(cond, x, y, t, 0.0)
    if cfg.mode == "classifier-only-cond":
        return lambda x, t: classifier_only_scores(classifier, x, t, y)
    return lambda x, t: classifier_only_scores(classifier, x, t, None)
