"""Training objectives for score networks and time-dependent classifiers.

Every loss takes :class:`~sclab.models.NetParams` whose arrays may be tracked
:class:`~sclab.diffmath.Var` leaves (training) or plain arrays (evaluation),
and returns a scalar ``Var``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .errors import EmptyBatchError, SGLDDivergedError, UnlabeledError
from .models import forward
from .sde import NoiseSchedule, kernel_score, perturb


@dataclass(frozen=True)
class LossWeights:
    lambda_sc: float = 0.0
    lambda_dlsm: float = 0.0
    lambda_jr: float = 0.0
    label_smoothing_eps: float = 0.0
    lambda_jem: float = 0.0

    def __post_init__(self):
        for name in ("lambda_sc", "lambda_dlsm", "lambda_jr", "lambda_jem"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.label_smoothing_eps < 1:
            raise ValueError("label_smoothing_eps must lie in [0, 1)")


@dataclass(frozen=True)
class SGLDConfig:
    """Short-run Langevin on the classifier energy.

    With ``scale_by_sigma`` the update at time t is
    ``x - step_size * sigma(t)^2 * dE/dx + noise_scale * sigma(t) * eps``.
    """

    steps: int = 20
    step_size: float = 0.05
    noise_scale: float = 0.1 ** 0.5
    scale_by_sigma: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sgld steps must be >= 1")


@dataclass
class PerturbedBatch:
    x0: np.ndarray
    labels: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    target: np.ndarray   # kernel score s_t(x_t | x0)
    weight: np.ndarray   # lambda(t)

    def __len__(self):
        return len(self.x0)

    @property
    def labeled_mask(self):
        return self.labels >= 0

    def subset(self, mask):
        if np.all(mask):
            return self
        return PerturbedBatch(self.x0[mask], self.labels[mask], self.t[mask],
                              self.xt[mask], self.target[mask], self.weight[mask])


def make_batch(schedule: NoiseSchedule, x0, labels, t, noise) -> PerturbedBatch:
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    labels = np.full(len(x0), -1) if labels is None else np.asarray(labels)
    xt = perturb(schedule, x0, t, noise)
    return PerturbedBatch(x0, labels, t, xt, kernel_score(schedule, xt, x0, t),
                          schedule.weight(t))


def _nonempty(batch):
    if len(batch) == 0:
        raise EmptyBatchError("loss needs at least one element")


def _require_labels(batch, code):
    if not np.all(batch.labeled_mask):
        raise UnlabeledError(code, "every element must carry a class label")


def _weighted_half_sq(vec, batch):
    """mean_i lambda(t_i) * 0.5 * ||vec_i - target_i||^2."""
    r = dm.sub(vec, batch.target)
    per = dm.reduce_sum(dm.square(r), axis=1)
    return dm.reduce_mean(dm.mul(per, 0.5 * batch.weight))


def dsm_loss(params, batch: PerturbedBatch):
    _nonempty(batch)
    s = forward(params, batch.xt, batch.t, tangents=False).value
    return _weighted_half_sq(s, batch)


def cond_dsm_loss(params, batch: PerturbedBatch):
    """DSM for the conditional network; unlabeled rows use the null token."""
    _nonempty(batch)
    tokens = np.where(batch.labels >= 0, batch.labels, params.null_token)
    s = forward(params, batch.xt, batch.t, labels=tokens, tangents=False).value
    return _weighted_half_sq(s, batch)


def _log_softmax_true(params, batch):
    out = forward(params, batch.xt, batch.t, tangents=False)
    logits = out.value
    return dm.sub(dm.pick(logits, batch.labels), dm.logsumexp(logits, axis=-1)), logits


def ce_loss(params, batch: PerturbedBatch):
    _nonempty(batch)
    _require_labels(batch, "unlabeled-in-ce")
    lp, _ = _log_softmax_true(params, batch)
    return dm.neg(dm.reduce_mean(lp))


def ls_ce_loss(params, batch: PerturbedBatch, eps: float):
    """Cross-entropy against (1 - eps) * one-hot + eps / K."""
    _nonempty(batch)
    _require_labels(batch, "unlabeled-in-ce")
    out = forward(params, batch.xt, batch.t, tangents=False)
    logits = out.value
    k = dm.value_of(logits).shape[-1]
    logp = dm.sub(logits, dm.expand(dm.logsumexp(logits, axis=-1), -1))
    q = np.full(dm.value_of(logits).shape, eps / k)
    q[np.arange(len(batch)), batch.labels] += 1.0 - eps
    return dm.neg(dm.reduce_mean(dm.reduce_sum(dm.mul(logp, q), axis=1)))


def sc_loss(params, batch: PerturbedBatch):
    """DSM on the classifier-internal score; labels are ignored."""
    _nonempty(batch)
    sc = forward(params, batch.xt, batch.t).logsumexp().gradient()
    return _weighted_half_sq(sc, batch)


def _detached(params):
    return params.with_arrays({k: np.asarray(dm.value_of(v)) for k, v in params.arrays.items()})


def dlsm_loss(cls_params, score_params, batch: PerturbedBatch):
    """DSM on posterior-gradient + frozen external score; only phi gets gradient."""
    _nonempty(batch)
    _require_labels(batch, "unlabeled-in-dlsm")
    out = forward(cls_params, batch.xt, batch.t)
    post = (out.pick(batch.labels) - out.logsumexp()).gradient()
    ext = dm.value_of(forward(_detached(score_params), batch.xt, batch.t, tangents=False).value)
    return _weighted_half_sq(dm.add(post, ext), batch)


def jacobian_reg_loss(params, batch: PerturbedBatch):
    """Mean squared Frobenius norm of d logits / dx."""
    _nonempty(batch)
    tan = forward(params, batch.xt, batch.t).tangents
    return dm.div(dm.reduce_sum(dm.square(tan)), float(len(batch)))


def sgld(energy_grad, x, steps, step_size, noise_scale, rng):
    """Langevin chains ``x <- x - step_size * grad E(x) + noise_scale * eps``.

    ``step_size`` and ``noise_scale`` may be scalars or per-row columns.
    """
    x = np.array(x, dtype=np.float64)
    for k in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            x = x - step_size * energy_grad(x) + noise_scale * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise SGLDDivergedError(f"non-finite chain state at step {k}", step=k)
    return x


def jem_loss(params, batch: PerturbedBatch, sgld_cfg: SGLDConfig, rng):
    """Contrastive EBM surrogate mean E(data) - mean E(negatives).

    Negatives come from short-run SGLD on the classifier energy at the same t,
    started at the perturbed batch, and are treated as constants.
    """
    _nonempty(batch)
    frozen = _detached(params)

    def energy_grad(x):
        return -dm.value_of(forward(frozen, x, batch.t).logsumexp().gradient())

    if sgld_cfg.scale_by_sigma:
        sig = params.schedule.sigma(batch.t)[:, None]
        step, noise = sgld_cfg.step_size * sig**2, sgld_cfg.noise_scale * sig
    else:
        step, noise = sgld_cfg.step_size, sgld_cfg.noise_scale
    neg = sgld(energy_grad, batch.xt, sgld_cfg.steps, step, noise, rng)
    e_pos = dm.neg(forward(params, batch.xt, batch.t, tangents=False).logsumexp().value)
    e_neg = dm.neg(forward(params, neg, batch.t, tangents=False).logsumexp().value)
    return dm.sub(dm.reduce_mean(e_pos), dm.reduce_mean(e_neg))


def classifier_loss_terms(params, batch_labeled, batch_all, weights: LossWeights,
                          score_params=None, sgld_cfg=None, rng=None):
    """Named loss terms (already weighted) whose sum is the classifier objective.

    Cross-entropy (or its label-smoothed form), DLSM and the Jacobian penalty
    use ``batch_labeled``; self-calibration and JEM use ``batch_all``.
    """
    terms = {}
    if weights.label_smoothing_eps > 0:
        terms["ce"] = ls_ce_loss(params, batch_labeled, weights.label_smoothing_eps)
    else:
        terms["ce"] = ce_loss(params, batch_labeled)
    if weights.lambda_sc > 0:
        terms["sc"] = dm.mul(sc_loss(params, batch_all), weights.lambda_sc)
    if weights.lambda_dlsm > 0:
        if score_params is None:
            raise ValueError("DLSM needs a trained unconditional score network")
        terms["dlsm"] = dm.mul(dlsm_loss(params, score_params, batch_labeled),
                               weights.lambda_dlsm)
    if weights.lambda_jr > 0:
        terms["jr"] = dm.mul(jacobian_reg_loss(params, batch_labeled), weights.lambda_jr)
    if weights.lambda_jem > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        terms["jem"] = dm.mul(jem_loss(params, batch_all, sgld_cfg or SGLDConfig(), rng),
                              weights.lambda_jem)
    return terms


def total_classifier_loss(params, batch_labeled, batch_all, weights: LossWeights,
                          score_params=None, sgld_cfg=None, rng=None):
    terms = classifier_loss_terms(params, batch_labeled, batch_all, weights,
                                  score_params, sgld_cfg, rng)
    total = None
    for v in terms.values():
        total = v if total is None else dm.add(total, v)
    return total
