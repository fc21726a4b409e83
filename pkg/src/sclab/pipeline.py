"""Experiment stages.  Each stage reads its inputs from and writes its outputs
to a run directory, so any stage can be re-run on its own.

Run directory layout::

    config.json                 verbatim copy of the input config
    resolved_config.json        config after defaults and overrides
    data/{labeled,unlabeled,test}.csv
    score.npz | classifier.npz | cond.npz
    runlog_<network>.jsonl
    samples.csv
    fields.csv
    metrics.json
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

from .data import Dataset, load_dataset, make_toy_dataset, save_dataset
from .evaluation import (MetricsReport, classifier_ece, classifier_posterior_grads,
                         cond_score_cs, conditional_field, density_coverage, field_from_model,
                         frechet_2d, grad_field_metrics, intra_metrics, oracle_cond_scores,
                         oracle_posterior_grads, oracle_uncond_score)
from .errors import TrainingDivergedError
from .guidance import make_score_fn
from .models import cond_score_eval, load_params, save_params
from .sde import pc_sample, write_samples_csv
from .training import train_classifier, train_cond_score, train_score

DATA_FILES = ("labeled", "unlabeled", "test")


def _path(out, *parts):
    return os.path.join(out, *parts)


def gen_data(cfg, out):
    os.makedirs(_path(out, "data"), exist_ok=True)
    sets = make_toy_dataset(cfg.dataset_spec())
    for name, ds in zip(DATA_FILES, sets):
        save_dataset(_path(out, "data", f"{name}.csv"), ds)
    return sets


def load_data(out):
    return tuple(load_dataset(_path(out, "data", f"{name}.csv")) for name in DATA_FILES)


def _train(fn, out, name, *args, **kwargs):
    """Run a trainer; on divergence persist the log before re-raising."""
    log_path = _path(out, f"runlog_{name}.jsonl")
    try:
        params, log = fn(*args, **kwargs)
    except TrainingDivergedError as exc:
        if exc.log is not None:
            exc.log.write_jsonl(log_path)
        raise
    log.write_jsonl(log_path)
    save_params(_path(out, f"{name}.npz"), params)
    return params, log


def stage_train_score(cfg, out):
    labeled, unlabeled, _ = load_data(out)
    x = np.concatenate([labeled.x, unlabeled.x])
    tc = dataclasses.replace(cfg.train_score, seed=cfg.stage_seed("score"))
    return _train(train_score, out, "score", tc, cfg.schedule, x, cfg.model)


def stage_train_classifier(cfg, out):
    labeled, unlabeled, _ = load_data(out)
    score = None
    if cfg.loss_weights.lambda_dlsm > 0:
        score = load_params(_path(out, "score.npz"))
    tc = dataclasses.replace(cfg.train_classifier, seed=cfg.stage_seed("classifier"))
    return _train(train_classifier, out, "classifier", tc, cfg.schedule, labeled, unlabeled,
                  cfg.loss_weights, cfg.model, score_params=score, sc_data=cfg.sc_data,
                  sgld_cfg=cfg.sgld)


def stage_train_cond(cfg, out):
    labeled, unlabeled, _ = load_data(out)
    tc = dataclasses.replace(cfg.train_cond, seed=cfg.stage_seed("cond"))
    return _train(train_cond_score, out, "cond", tc, cfg.schedule, labeled, unlabeled,
                  cfg.cond_mode, cfg.model, p_uncond=cfg.p_uncond)


def _networks(cfg, out):
    if cfg.uses_classifier:
        return dict(score=load_params(_path(out, "score.npz")),
                    classifier=load_params(_path(out, "classifier.npz")))
    return dict(cond=load_params(_path(out, "cond.npz")))


def _sampler_config(cfg, y):
    ss = np.random.SeedSequence([cfg.seed, cfg.sampler.seed, 3, y + 1])
    return dataclasses.replace(cfg.sampler, seed=int(ss.generate_state(1)[0]))


def stage_sample(cfg, out):
    """Draw ``n_samples_per_class`` points per class (or K times that, unlabeled,
    for classifier-only unconditional generation) and write ``samples.csv``."""
    nets = _networks(cfg, out)
    k = cfg.data.gmm().n_classes
    n = cfg.n_samples_per_class
    if cfg.guidance.mode == "classifier-only-uncond":
        fn = make_score_fn(cfg.guidance, None, **nets)
        pts = pc_sample(fn, _sampler_config(cfg, -1), cfg.schedule, n * k)
        samples = Dataset(pts, np.full(len(pts), -1))
    else:
        chunks, labels = [], []
        for y in range(k):
            fn = make_score_fn(cfg.guidance, y, **nets)
            chunks.append(pc_sample(fn, _sampler_config(cfg, y), cfg.schedule, n))
            labels.append(np.full(n, y))
        samples = Dataset(np.concatenate(chunks), np.concatenate(labels))
    write_samples_csv(_path(out, "samples.csv"), samples.x, samples.labels)
    return samples


def stage_eval(cfg, out):
    """Recompute every metric from files in the run directory."""
    _, _, test = load_data(out)
    samples = load_dataset(_path(out, "samples.csv"))
    nets = _networks(cfg, out)
    gmm = cfg.data.gmm()
    k = gmm.n_classes
    grid, t = cfg.eval.grid, cfg.eval.t
    values = {}
    truth_cond = field_from_model(oracle_cond_scores(gmm, cfg.schedule), grid, t)
    if cfg.uses_classifier:
        cls = nets["classifier"]
        field = field_from_model(classifier_posterior_grads(cls), grid, t)
        truth = field_from_model(oracle_posterior_grads(gmm, cfg.schedule), grid, t)
        unc = field_from_model(oracle_uncond_score(gmm, cfg.schedule), grid, t)
        values["grad_mse"], values["grad_cs"] = grad_field_metrics(field, truth)
        values["cond_score_cs"] = cond_score_cs(conditional_field(field, unc), truth_cond)
    else:
        cond = nets["cond"]

        def cond_fn(pts, tt):
            return np.stack([cond_score_eval(cond, pts, y, tt) for y in range(k)])

        field = field_from_model(cond_fn, grid, t)
        values["cond_score_cs"] = cond_score_cs(field, truth_cond)
    field.to_csv(_path(out, "fields.csv"))

    values["fd2"] = frechet_2d(test.x, samples.x)
    values["density"], values["coverage"] = density_coverage(test.x, samples.x, cfg.eval.k)
    if np.all(samples.labeled_mask):
        real_by, gen_by = test.by_class(k), samples.by_class(k)
        values["intra_fd2"] = intra_metrics(real_by, gen_by, "fd2")
        values["intra_density"] = intra_metrics(real_by, gen_by, "density", cfg.eval.k)
        values["intra_coverage"] = intra_metrics(real_by, gen_by, "coverage", cfg.eval.k)
    if cfg.uses_classifier:
        values["ece"] = classifier_ece(nets["classifier"], test, cfg.eval.n_buckets)
    report = MetricsReport(values)
    report.to_json(_path(out, "metrics.json"))
    return report


STAGES = {
    "gen-data": gen_data,
    "train-score": stage_train_score,
    "train-classifier": stage_train_classifier,
    "train-cond": stage_train_cond,
    "sample": stage_sample,
    "eval": stage_eval,
}


def run_pipeline(cfg, out, log=print):
    os.makedirs(out, exist_ok=True)
    result = None
    for name in cfg.pipeline():
        log(f"[{name}]")
        result = STAGES[name](cfg, out)
    return result
