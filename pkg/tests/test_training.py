import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sclab import diffmath as dm
from sclab.data import (UNLABELED, Dataset, ToyDatasetSpec, make_toy_dataset,
                        symmetric_two_class_gmm)
from sclab.errors import NoLabeledDataError, TrainingDivergedError
from sclab.losses import LossWeights
from sclab.models import init_params, posterior
from sclab.sde import NoiseSchedule
from sclab.training import (Adam, ModelShape, RunLog, TrainConfig, _optimize, compose_batch,
                            named_streams, train_classifier, train_cond_score, train_score)

SCHED = NoiseSchedule()
SMALL = ModelShape(hidden=32, depth=2)


def toy(frac=1.0, n=400, seed=0, offset=4.0):
    return make_toy_dataset(ToyDatasetSpec(symmetric_two_class_gmm(offset, 0.8), n, n, frac, seed))


class TestComposeBatch:
    def test_half_labeled(self):
        lab, unl, _ = toy(0.2)
        x_l, y_l, xf, yf = compose_batch(lab, unl, 64, np.random.default_rng(0))
        assert len(x_l) == 32 and len(xf) == 64
        assert np.all(yf[:32] >= 0) and np.all(yf[32:] == UNLABELED)

    def test_fully_supervised_draws_both_halves_from_labeled(self):
        lab, unl, _ = toy(1.0)
        assert len(unl) == 0
        _, _, xf, yf = compose_batch(lab, unl, 64, np.random.default_rng(0))
        assert np.all(yf >= 0)
        members = {tuple(r) for r in lab.x}
        assert all(tuple(r) in members for r in xf)

    def test_small_pool_with_replacement(self):
        lab = Dataset(np.zeros((3, 2)), [0, 1, 0])
        x_l, _, _, _ = compose_batch(lab, Dataset.empty(), 20, np.random.default_rng(0))
        assert len(x_l) == 10

    def test_empty_labeled_pool(self):
        with pytest.raises(NoLabeledDataError):
            compose_batch(Dataset.empty(), Dataset.empty(), 4, np.random.default_rng(0))

    def test_draw_frequencies_uniform(self):
        """Each of 50 labeled points is drawn with probability 16/50 per batch."""
        lab = Dataset(np.arange(100.0).reshape(50, 2), np.zeros(50))
        unl = Dataset(np.ones((200, 2)), np.full(200, UNLABELED))
        rng = np.random.default_rng(0)
        n_batches = 10_000
        counts = np.zeros(50)
        for _ in range(n_batches):
            x_l, _, _, _ = compose_batch(lab, unl, 32, rng)
            counts += np.bincount((x_l[:, 0] // 2).astype(int), minlength=50)
        p = 16 / 50
        sd = np.sqrt(n_batches * p * (1 - p))
        assert np.all(np.abs(counts - n_batches * p) < 3.5 * sd)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        opt = Adam(lr=0.1)
        p = {"w": np.array([1.0, -2.0])}
        for _ in range(20):
            p = opt.step(p, {"w": np.zeros(2)})
        assert np.array_equal(p["w"], [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        p = Adam(lr=0.01).step({"w": np.zeros(3)}, {"w": np.array([2.0, -0.5, 1e-3])})
        assert_allclose(p["w"], [-0.01, 0.01, -0.01], rtol=1e-4)


class TestRunLog:
    def test_monotone_steps(self):
        log = RunLog()
        log.append(1, {"ce": 0.5}, 1.0)
        with pytest.raises(ValueError):
            log.append(1, {"ce": 0.4}, 1.0)

    def test_jsonl(self, tmp_path):
        log = RunLog()
        for s in range(1, 4):
            log.append(s, {"ce": 1.0 / s}, 2.0)
        path = tmp_path / "log.jsonl"
        log.write_jsonl(path)
        recs = [json.loads(line) for line in open(path)]
        assert [r["step"] for r in recs] == [1, 2, 3]
        assert set(recs[0]) == {"step", "ce", "wall_ms"}


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(batch_size=7), dict(steps=0), dict(learning_rate=0.0),
                                    dict(optimizer="sgd"), dict(labeled_fraction=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_constant_rate_by_default(self):
        cfg = TrainConfig(steps=10, learning_rate=0.1)
        assert [cfg.lr_at(s) for s in (1, 5, 10)] == [0.1, 0.1, 0.1]

    def test_cosine_decay(self):
        cfg = TrainConfig(steps=4, learning_rate=1.0, lr_decay="cosine")
        assert_allclose([cfg.lr_at(s) for s in range(1, 5)],
                        [1.0, (1 + np.cos(np.pi / 4)) / 2, 0.5, (1 + np.cos(3 * np.pi / 4)) / 2])

    def test_unknown_decay(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_decay="step")

    def test_named_streams_independent_and_reproducible(self):
        a, b = named_streams(5), named_streams(5)
        assert a["batch"].random() == b["batch"].random()
        c = named_streams(5)
        assert c["batch"].random() != c["noise"].random()


class TestClassifierTraining:
    def test_separable_data_reaches_high_accuracy(self):
        lab, unl, test = toy(1.0, offset=4.0)
        cfg = TrainConfig(batch_size=64, steps=300, learning_rate=3e-3, seed=0)
        params, log = train_classifier(cfg, SCHED, lab, unl, LossWeights(), SMALL)
        acc = np.mean(posterior(params, test.x, 0.0).argmax(axis=1) == test.labels)
        assert acc > 0.95
        assert len(log) == 300

    def test_self_calibration_run_is_finite(self):
        lab, unl, _ = toy(0.2)
        cfg = TrainConfig(batch_size=32, steps=60, learning_rate=1e-3)
        _, log = train_classifier(cfg, SCHED, lab, unl, LossWeights(lambda_sc=1.0), SMALL)
        assert np.all(np.isfinite(log.column("sc")))
        assert np.all(np.isfinite(log.column("loss")))

    def test_seed_determinism(self):
        lab, unl, _ = toy(0.2)
        cfg = TrainConfig(batch_size=16, steps=20, learning_rate=1e-3, seed=3)
        w = LossWeights(lambda_sc=1.0)
        a, _ = train_classifier(cfg, SCHED, lab, unl, w, SMALL)
        b, _ = train_classifier(cfg, SCHED, lab, unl, w, SMALL)
        for k in a.arrays:
            assert np.array_equal(a.arrays[k], b.arrays[k])

    def test_sc_data_choice_irrelevant_at_full_labels(self):
        lab, unl, _ = toy(1.0)
        cfg = TrainConfig(batch_size=16, steps=15, learning_rate=1e-3)
        w = LossWeights(lambda_sc=1.0)
        a, _ = train_classifier(cfg, SCHED, lab, unl, w, SMALL, sc_data="all")
        b, _ = train_classifier(cfg, SCHED, lab, unl, w, SMALL, sc_data="labeled")
        for k in a.arrays:
            assert np.array_equal(a.arrays[k], b.arrays[k])

    def test_sc_data_matters_with_unlabeled(self):
        lab, unl, _ = toy(0.2)
        cfg = TrainConfig(batch_size=16, steps=5, learning_rate=1e-3)
        w = LossWeights(lambda_sc=1.0)
        a, _ = train_classifier(cfg, SCHED, lab, unl, w, SMALL, sc_data="all")
        b, _ = train_classifier(cfg, SCHED, lab, unl, w, SMALL, sc_data="labeled")
        assert not np.array_equal(a.arrays["W0x"], b.arrays["W0x"])

    def test_empty_labeled(self):
        with pytest.raises(NoLabeledDataError):
            train_classifier(TrainConfig(), SCHED, Dataset.empty(), Dataset.empty(),
                             LossWeights())


class TestDivergence:
    def test_non_finite_loss_aborts_with_last_checkpoint(self):
        params = init_params("score", np.random.default_rng(0), hidden=4, depth=1)
        cfg = TrainConfig(steps=10, eval_every=2, learning_rate=1e-3)

        def terms(p, step):
            w = p.arrays["bout"]
            scale = np.inf if step == 5 else 1.0
            return {"sq": dm.mul(dm.reduce_sum(dm.square(dm.sub(w, 1.0))), scale)}

        with pytest.raises(TrainingDivergedError) as info:
            _optimize(params, terms, cfg, named_streams(0))
        err = info.value
        assert len(err.log) == 4
        # checkpoint taken after step 4
        assert not np.array_equal(err.params.arrays["bout"], params.arrays["bout"])


class TestScoreTraining:
    def test_loss_decreases(self):
        lab, unl, _ = toy(1.0, n=200)
        cfg = TrainConfig(batch_size=64, steps=400, learning_rate=2e-3)
        _, log = train_score(cfg, SCHED, lab, SMALL)
        dsm = log.column("dsm")
        assert np.median(dsm[-100:]) < np.median(dsm[:100])

    def test_zero_init_output(self):
        lab, _, _ = toy(1.0, n=50)
        cfg = TrainConfig(batch_size=8, steps=1, learning_rate=1e-12)
        params, _ = train_score(cfg, SCHED, lab, SMALL)
        from sclab.models import score_net_eval
        assert np.max(np.abs(score_net_eval(params, lab.x, 0.5))) < 1e-8


class TestCondTraining:
    @pytest.mark.parametrize("mode", ["cond", "cfg-labeled", "cfg-all"])
    def test_modes_run(self, mode):
        lab, unl, _ = toy(0.2, n=100)
        cfg = TrainConfig(batch_size=16, steps=10, learning_rate=1e-3)
        params, log = train_cond_score(cfg, SCHED, lab, unl, mode, SMALL)
        assert len(log) == 10 and params.kind == "cond_score"

    def test_cond_mode_never_trains_null_row(self):
        lab, unl, _ = toy(0.2, n=100)
        cfg = TrainConfig(batch_size=16, steps=10, learning_rate=1e-3)
        init = init_params("cond_score", named_streams(0)["init"], n_classes=2, hidden=32,
                           depth=2)
        params, _ = train_cond_score(cfg, SCHED, lab, unl, "cond", SMALL)
        assert np.array_equal(params.arrays["emb0"][2], init.arrays["emb0"][2])

    def test_unknown_mode(self):
        lab, unl, _ = toy(0.2, n=100)
        with pytest.raises(ValueError):
            train_cond_score(TrainConfig(), SCHED, lab, unl, "cfg-some", SMALL)
