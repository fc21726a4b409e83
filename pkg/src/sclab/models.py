"""Time-conditioned MLPs and the analytic Gaussian-mixture ground truth.

Three network kinds share one trunk:

* ``score``      - s(x, t; theta), output divided by sigma(t)
* ``classifier`` - K logits f(x, y, t; phi)
* ``cond_score`` - s(x, y, t), label embedding added to every hidden layer;
  row K of each embedding table is the null token.

The trunk sees x scaled by 1 / sqrt(data_scale^2 + sigma(t)^2) and a fixed
sinusoidal embedding of log sigma(t).  All activations are softplus so that
input-gradients can themselves be differentiated.
"""

from __future__ import annotations

import json
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import DualVector
from .errors import SingularCovarianceError
from .sde import NoiseSchedule

TIME_FREQS = np.geomspace(0.25, 4.0, 8)
FROZEN = frozenset({"time_freqs"})


@dataclass
class NetParams:
    kind: str
    arrays: dict
    n_classes: int = 0
    data_scale: float = 1.0
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    @property
    def null_token(self):
        return self.n_classes

    def trainable(self):
        return {k: v for k, v in self.arrays.items() if k not in FROZEN}

    def with_arrays(self, arrays):
        merged = dict(self.arrays)
        merged.update(arrays)
        return NetParams(self.kind, merged, self.n_classes, self.data_scale, self.schedule)

    def copy(self):
        return self.with_arrays({k: np.array(dm.value_of(v), copy=True)
                                 for k, v in self.arrays.items()})


def init_params(kind, rng, n_classes=0, hidden=128, depth=3, data_scale=1.0,
                schedule=None, zero_final=True):
    """Random MLP parameters.  ``depth`` counts hidden layers."""
    if kind not in ("score", "classifier", "cond_score"):
        raise ValueError(f"unknown network kind {kind!r}")
    if kind in ("classifier", "cond_score") and n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    n_out = n_classes if kind == "classifier" else 2
    emb = 2 * len(TIME_FREQS)

    def dense(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in)

    a = {
        "time_freqs": TIME_FREQS.copy(),
        "W0x": dense(2, hidden),
        "W0t": dense(emb, hidden),
        "b0": np.zeros(hidden),
    }
    for i in range(1, depth):
        a[f"W{i}"] = dense(hidden, hidden) * np.sqrt(2.0)
        a[f"b{i}"] = np.zeros(hidden)
    a["Wout"] = np.zeros((hidden, n_out)) if zero_final else dense(hidden, n_out)
    a["bout"] = np.zeros(n_out)
    if kind == "cond_score":
        for i in range(depth):
            a[f"emb{i}"] = rng.standard_normal((n_classes + 1, hidden)) * 0.1
    return NetParams(kind, a, n_classes, float(data_scale), schedule or NoiseSchedule())


# evaluation -----------------------------------------------------------------

def _times(t, n):
    t = np.asarray(t, dtype=np.float64)
    return np.full(n, float(t)) if t.ndim == 0 else t


def time_embedding(params: NetParams, t):
    ls = np.log(params.schedule.sigma(t))[:, None]
    ang = ls * dm.value_of(params.arrays["time_freqs"])[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def forward(params: NetParams, x, t, labels=None, tangents=True):
    """Network output as a :class:`DualVector` over a batch.

    ``x`` is (B, 2) or already a DualVector; ``t`` scalar or (B,).
    ``labels`` (B,) is required for ``cond_score`` (use ``null_token``).
    With ``tangents=False`` input derivatives are not propagated.
    """
    a = params.arrays
    if isinstance(x, DualVector):
        xd = x
    else:
        x = np.asarray(x, dtype=np.float64)
        xd = DualVector.seed(x) if tangents else DualVector(x)
    n = np.shape(dm.value_of(xd.value))[0]
    t = _times(t, n)
    sig = params.schedule.sigma(t)
    c_in = (1.0 / np.sqrt(params.data_scale**2 + sig**2))[:, None]
    temb = time_embedding(params, t)
    h = (xd * c_in).affine(a["W0x"]) + dm.add(dm.matmul(temb, a["W0t"]), a["b0"])
    if params.kind == "cond_score":
        if labels is None:
            raise ValueError("cond_score needs labels (null token for unconditional)")
        h = h + dm.rows(a["emb0"], labels)
    h = h.softplus()
    i = 1
    while f"W{i}" in a:
        h = h.affine(a[f"W{i}"], a[f"b{i}"])
        if params.kind == "cond_score":
            h = h + dm.rows(a[f"emb{i}"], labels)
        h = h.softplus()
        i += 1
    out = h.affine(a["Wout"], a["bout"])
    if params.kind in ("score", "cond_score"):
        out = out * (1.0 / sig)[:, None]
    return out


def _result(v, single):
    if isinstance(v, dm.Var) and v.tracked:
        return v
    arr = dm.value_of(v)
    return arr[0] if single else arr


def _batch(x):
    x = np.asarray(dm.value_of(x), dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _labels(y, n):
    y = np.asarray(y, dtype=np.intp)
    return np.full(n, int(y), dtype=np.intp) if y.ndim == 0 else y


def score_net_eval(params, x, t):
    x, single = _batch(x)
    return _result(forward(params, x, t, tangents=False).value, single)


def cond_score_eval(params, x, y_or_nil, t):
    """Conditional score; pass ``None`` (or ``params.null_token``) for the null token."""
    x, single = _batch(x)
    y = params.null_token if y_or_nil is None else y_or_nil
    out = forward(params, x, t, labels=_labels(y, len(x)), tangents=False)
    return _result(out.value, single)


def classifier_logits(params, x, t):
    x, single = _batch(x)
    return _result(forward(params, x, t, tangents=False).value, single)


def posterior(params, x, t):
    logits = dm.value_of(classifier_logits(params, x, t))
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def energy(params, x, t):
    """E(x, t) = -logsumexp_y f(x, y, t)."""
    x, single = _batch(x)
    out = forward(params, x, t, tangents=False).logsumexp()
    return _result(dm.neg(out.value), single)


def logit_grad(params, x, y, t):
    """∇_x f(x, y, t), the classifier-only conditional score."""
    x, single = _batch(x)
    out = forward(params, x, t).pick(_labels(y, len(x)))
    return _result(out.gradient(), single)


def internal_score(params, x, t):
    """Classifier-internal unconditional score ∇_x logsumexp_y f(x, y, t)."""
    x, single = _batch(x)
    return _result(forward(params, x, t).logsumexp().gradient(), single)


def posterior_log_grad(params, x, y, t):
    """∇_x log softmax_y f(x, ., t) = ∇_x f_y - internal score."""
    x, single = _batch(x)
    out = forward(params, x, t)
    g = (out.pick(_labels(y, len(x))) - out.logsumexp()).gradient()
    return _result(g, single)


def all_posterior_log_grads(params, x, t):
    """∇_x log p(y|x) for every class at once: array (K, B, 2)."""
    x = np.asarray(x, dtype=np.float64)
    out = forward(params, x, t)
    jac = dm.value_of(out.jacobian())                       # (B, K, 2)
    sc = dm.value_of(out.logsumexp().gradient())             # (B, 2)
    return np.transpose(jac - sc[:, None, :], (1, 0, 2))


# checkpoints --------------------------------------------------------------

def save_params(path, params: NetParams):
    """Write an ``.npz`` of named float64 arrays plus a JSON ``__meta__`` entry."""
    meta = {
        "kind": params.kind,
        "n_classes": params.n_classes,
        "data_scale": params.data_scale,
        "sigma_min": params.schedule.sigma_min,
        "sigma_max": params.schedule.sigma_max,
    }
    arrays = {k: np.asarray(dm.value_of(v), dtype=np.float64) for k, v in params.arrays.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_params(path) -> NetParams:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k: z[k].copy() for k in z.files if k != "__meta__"}
    schedule = NoiseSchedule(meta["sigma_min"], meta["sigma_max"])
    return NetParams(meta["kind"], arrays, meta["n_classes"], meta["data_scale"], schedule)


# Gaussian-mixture oracle -----------------------------------------------------

@dataclass
class GmmSpec:
    """Class-conditional Gaussian mixtures.

    ``components[y]`` is a list of ``(mean, cov, weight)`` for class y.
    """

    components: list
    priors: np.ndarray

    def __post_init__(self):
        self.priors = np.asarray(self.priors, dtype=np.float64)
        if len(self.components) != len(self.priors):
            raise ValueError("one prior per class required")
        if not np.isclose(self.priors.sum(), 1.0, atol=1e-12) or np.any(self.priors < 0):
            raise ValueError("class priors must be a probability vector")
        means, covs, logw, cls = [], [], [], []
        for y, comps in enumerate(self.components):
            w = np.array([c[2] for c in comps], dtype=np.float64)
            if len(comps) == 0 or not np.isclose(w.sum(), 1.0, atol=1e-12) or np.any(w <= 0):
                raise ValueError(f"component weights of class {y} must sum to 1")
            for mean, cov, weight in comps:
                cov = np.asarray(cov, dtype=np.float64)
                if not np.allclose(cov, cov.T):
                    raise SingularCovarianceError(f"covariance of class {y} not symmetric")
                if np.linalg.eigvalsh(cov).min() <= 0:
                    raise SingularCovarianceError(f"covariance of class {y} not positive definite")
                means.append(np.asarray(mean, dtype=np.float64))
                covs.append(cov)
                logw.append(np.log(self.priors[y]) + np.log(weight))
                cls.append(y)
        self.means = np.array(means)
        self.covs = np.array(covs)
        self.log_weights = np.array(logw)
        self.component_class = np.array(cls, dtype=np.intp)

    @property
    def n_classes(self):
        return len(self.priors)

    def sample(self, n, rng):
        """``n`` labelled draws: points (n, 2), labels (n,)."""
        labels = rng.choice(self.n_classes, size=n, p=self.priors)
        pts = np.empty((n, 2))
        chol = np.linalg.cholesky(self.covs)
        for y in range(self.n_classes):
            idx = np.flatnonzero(labels == y)
            comp_ids = np.flatnonzero(self.component_class == y)
            w = np.exp(self.log_weights[comp_ids] - np.log(self.priors[y]))
            pick = rng.choice(comp_ids, size=len(idx), p=w / w.sum())
            z = rng.standard_normal((len(idx), 2))
            pts[idx] = self.means[pick] + np.einsum("nij,nj->ni", chol[pick], z)
        return pts, labels


OracleScores = namedtuple("OracleScores", "uncond cond posterior_grad posterior")


def _component_terms(spec: GmmSpec, x, var):
    covs = spec.covs + var * np.eye(2)
    inv = np.linalg.inv(covs)
    _, logdet = np.linalg.slogdet(covs)
    d = x[None, :, :] - spec.means[:, None, :]                      # (C, N, 2)
    maha = np.einsum("cni,cij,cnj->cn", d, inv, d)
    logn = -0.5 * maha - 0.5 * logdet[:, None] - np.log(2 * np.pi)
    grads = -np.einsum("cij,cnj->cni", inv, d)
    return spec.log_weights[:, None] + logn, grads                    # (C, N), (C, N, 2)


def _lse0(a):
    m = a.max(axis=0)
    return m + np.log(np.exp(a - m).sum(axis=0))


def gmm_log_densities(spec: GmmSpec, x, t, schedule=None):
    """log p_t(x), log p_t(x|y) (K, N) and log p_t(y|x) (K, N)."""
    schedule = schedule or NoiseSchedule()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    logc, _ = _component_terms(spec, x, schedule.sigma(t) ** 2)
    log_joint = np.array([_lse0(logc[spec.component_class == y]) for y in range(spec.n_classes)])
    log_px = _lse0(log_joint)
    log_cond = log_joint - np.log(spec.priors)[:, None]
    return log_px, log_cond, log_joint - log_px[None, :]


def gmm_oracle_scores(spec: GmmSpec, x, t, schedule=None) -> OracleScores:
    """Closed-form scores of the sigma(t)-inflated mixture at points ``x`` (N, 2).

    Returns unconditional score (N, 2), conditional scores (K, N, 2),
    ∇_x log p(y|x) (K, N, 2) and posterior p(y|x) (N, K).
    """
    schedule = schedule or NoiseSchedule()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    logc, grads = _component_terms(spec, x, schedule.sigma(t) ** 2)
    resp_all = np.exp(logc - _lse0(logc)[None, :])
    uncond = np.einsum("cn,cni->ni", resp_all, grads)
    cond = np.empty((spec.n_classes,) + x.shape)
    log_joint = np.empty((spec.n_classes, len(x)))
    for y in range(spec.n_classes):
        sel = spec.component_class == y
        lj = _lse0(logc[sel])
        log_joint[y] = lj
        resp = np.exp(logc[sel] - lj[None, :])
        cond[y] = np.einsum("cn,cni->ni", resp, grads[sel])
    post = np.exp(log_joint - _lse0(log_joint)[None, :]).T
    return OracleScores(uncond, cond, cond - uncond[None], post)
