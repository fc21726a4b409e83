import numpy as np
import pytest
from numpy.testing import assert_allclose

from sclab.data import default_toy_gmm, symmetric_two_class_gmm
from sclab.evaluation import GridSpec
from sclab.guidance import (LAMBDA_CFG_SWEEP, LAMBDA_CG_SWEEP, GuidanceConfig, cfg_score,
                            classifier_only_scores, guided_score, make_score_fn,
                            oracle_classifier, oracle_score)
from sclab.models import (gmm_oracle_scores, init_params, internal_score, posterior_log_grad,
                          score_net_eval)
from sclab.sde import NoiseSchedule, SamplerConfig, pc_sample


def net(kind, seed=0, k=2):
    return init_params(kind, np.random.default_rng(seed), n_classes=k, hidden=12, depth=2,
                       zero_final=False)


X = np.random.default_rng(9).standard_normal((7, 2)) * 3


class TestGuidedScore:
    def test_zero_weight_is_unconditional(self):
        s, c = net("score"), net("classifier", 1)
        assert np.array_equal(guided_score(s, c, X, 1, 0.3, 0.0), score_net_eval(s, X, 0.3))

    def test_networks(self):
        s, c = net("score"), net("classifier", 1)
        expected = score_net_eval(s, X, 0.3) + 1.5 * posterior_log_grad(c, X, 0, 0.3)
        assert_allclose(guided_score(s, c, X, 0, 0.3, 1.5), expected, rtol=1e-12)

    def test_oracle_pair_gives_conditional_score_on_grid(self):
        spec = default_toy_gmm()
        pts = GridSpec().points()
        truth = gmm_oracle_scores(spec, pts, 0.0)
        for y in range(2):
            got = guided_score(oracle_score(spec), oracle_classifier(spec), pts, y, 0.0, 1.0)
            assert np.max(np.abs(got - truth.cond[y])) < 1e-8

    def test_linear_in_weight(self):
        s, c = net("score"), net("classifier", 1)
        g = [guided_score(s, c, X, 1, 0.5, lam) for lam in (0.0, 1.0, 2.0)]
        assert_allclose(g[2] - g[1], g[1] - g[0], atol=1e-12)

    def test_sweep_presets(self):
        assert LAMBDA_CG_SWEEP == (0.5, 0.8, 1.0, 1.2, 1.5, 2.0, 2.5)
        assert LAMBDA_CFG_SWEEP == (0.0, 0.1, 0.2, 0.4)


class TestCFG:
    def test_zero_weight_is_conditional(self):
        from sclab.models import cond_score_eval
        p = net("cond_score")
        assert np.array_equal(cfg_score(p, X, 1, 0.2, 0.0), cond_score_eval(p, X, 1, 0.2))

    def test_formula(self):
        from sclab.models import cond_score_eval
        p = net("cond_score")
        expected = 1.4 * cond_score_eval(p, X, 0, 0.2) - 0.4 * cond_score_eval(p, X, None, 0.2)
        assert_allclose(cfg_score(p, X, 0, 0.2, 0.4), expected, rtol=1e-12)

    def test_weight_irrelevant_when_class_matches_null(self):
        p = net("cond_score")
        emb = {k: v.copy() for k, v in p.arrays.items() if k.startswith("emb")}
        for v in emb.values():
            v[1] = v[2]          # class 1 embedding equals the null token
        q = p.with_arrays(emb)
        base = cfg_score(q, X, 1, 0.6, 0.0)
        for lam in LAMBDA_CFG_SWEEP:
            assert_allclose(cfg_score(q, X, 1, 0.6, lam), base, atol=1e-12)


class TestClassifierOnly:
    def test_conditional_decomposes(self):
        c = net("classifier", 2, k=3)
        for y in range(3):
            assert_allclose(classifier_only_scores(c, X, 0.4, y),
                            internal_score(c, X, 0.4) + posterior_log_grad(c, X, y, 0.4),
                            atol=1e-10)

    def test_single_class_conditional_equals_unconditional(self):
        c = net("classifier", 3, k=1)
        assert_allclose(classifier_only_scores(c, X, 0.4, 0), classifier_only_scores(c, X, 0.4),
                        atol=1e-12)

    def test_matches_fd_of_logit(self):
        from sclab.models import classifier_logits
        c = net("classifier", 4)
        x = np.array([0.5, -1.5])
        h = 1e-6
        fd = np.array([(classifier_logits(c, x + h * e, 0.2)[1]
                        - classifier_logits(c, x - h * e, 0.2)[1]) / (2 * h) for e in np.eye(2)])
        assert_allclose(classifier_only_scores(c, x, 0.2, 1)[0], fd, rtol=1e-6)


class TestConfig:
    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            GuidanceConfig(mode="mixed")

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            GuidanceConfig(lambda_cg=-1.0)

    @pytest.mark.parametrize("mode", ["cg", "cfg", "cond", "classifier-only-cond",
                                      "classifier-only-uncond"])
    def test_closures_return_vectors(self, mode):
        fn = make_score_fn(GuidanceConfig(mode=mode), 1, score=net("score"),
                           classifier=net("classifier", 1), cond=net("cond_score", 2))
        assert fn(X, 0.5).shape == X.shape


def test_oracle_guided_samples_land_in_target_class():
    spec = symmetric_two_class_gmm()
    sched = NoiseSchedule()
    cfg = GuidanceConfig(mode="cg", lambda_cg=1.0)
    for y in range(2):
        fn = make_score_fn(cfg, y, score=oracle_score(spec, sched),
                           classifier=oracle_classifier(spec, sched))
        x = pc_sample(fn, SamplerConfig(n_steps=1000, seed=y), sched, 500)
        post = gmm_oracle_scores(spec, x, 0.0, sched).posterior[:, y]
        assert np.median(post) > 0.9
