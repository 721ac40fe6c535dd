import numpy as np
import pytest
from dataclasses import replace

from lnlab import diagnostics as diag
from lnlab import suites
from lnlab.attention import ActivationKinkError
from lnlab.model import (
    ModelConfig,
    PlacementError,
    model_forward,
    random_model,
    zero_weight_block,
)
from lnlab.normalization import LNParams
from lnlab.numerics import RngStream, moments


def peri_cfg(depth=8, dt=1.0, **kw):
    base = dict(d=4, n=3, k=3, m=5, heads=1, placement="peri", delta_t=dt, depth=depth)
    base.update(kw)
    return ModelConfig(**base)


class TestLayerMoments:
    def test_zero_weight_model_constant_series(self):
        cfg = peri_cfg(depth=4)
        params = [zero_weight_block(cfg) for _ in range(4)]
        X = RngStream(0).generator().normal(size=(4, 3))
        tape = model_forward(X, params, cfg)
        series = diag.layer_moments(tape)
        assert len(series) == 5
        assert all(m == series[0] for m in series)

    def test_matches_moments_definitionally(self):
        cfg = peri_cfg(depth=3)
        params = random_model(cfg, RngStream(1))
        tape = model_forward(RngStream(2).generator().normal(size=(4, 3)), params, cfg)
        for state, mo in zip(tape.states, diag.layer_moments(tape)):
            assert mo == moments(state)

    def test_delta_t_shrinks_every_increment(self):
        for seed in range(20):
            cfg1 = peri_cfg(depth=12, dt=1.0, d=6, n=4, k=4, m=8)
            cfg01 = replace(cfg1, delta_t=0.1)
            params = random_model(cfg1, RngStream(seed))
            X = RngStream(seed, 9).generator().normal(size=(6, 4))
            t1 = model_forward(X, params, cfg1)
            t01 = model_forward(X, params, cfg01)
            inc1 = [np.linalg.norm(t1.states[i + 1] - t1.states[i]) for i in range(12)]
            inc01 = [np.linalg.norm(t01.states[i + 1] - t01.states[i]) for i in range(12)]
            assert all(a < b for a, b in zip(inc01, inc1))


class TestGrowthBounds:
    def test_margins_nonnegative_random_models(self):
        reports = suites.run_growth_suite(30, seed=0)
        assert all(r.margin >= -1e-9 for r in reports)

    def test_gamma_zero_collapses_rhs(self):
        cfg = peri_cfg(depth=3, epsilon=1e-5)
        params = random_model(cfg, RngStream(3))
        for b in params:
            for site in ("attn_out", "ffn_out"):
                b.ln[site] = LNParams(np.zeros(4), np.zeros(4), 1e-5, "layernorm")
        X = RngStream(4).generator().normal(size=(4, 3))
        tape = model_forward(X, params, cfg)
        assert np.array_equal(tape.x_final, X)  # output LN emits beta = 0 only
        ma_report = diag.peri_growth_check(tape)[0]
        assert ma_report.rhs == pytest.approx(np.linalg.norm(X) / np.sqrt(12), abs=1e-12)
        assert ma_report.margin >= 0

    def test_wrong_placement_rejected(self):
        cfg = peri_cfg()
        pre_cfg = replace(cfg, placement="pre")
        params = random_model(pre_cfg, RngStream(5))
        tape = model_forward(np.ones((4, 3)), params, pre_cfg)
        with pytest.raises(PlacementError):
            diag.peri_growth_check(tape)


class TestDatawiseVariance:
    def test_identical_inputs_zero_lhs(self):
        cfg = peri_cfg(depth=4)
        params = random_model(cfg, RngStream(6))
        x0 = RngStream(7).generator().normal(size=(4, 3))
        report = diag.datawise_variance_check([x0.copy() for _ in range(4)], params, cfg, (1, 2))
        assert report.lhs == 0.0
        assert report.margin >= 0

    def test_random_inputs_margin_nonnegative(self):
        cfg = peri_cfg(depth=8)
        params = random_model(cfg, RngStream(8))
        gen = RngStream(9).generator()
        inputs = [gen.normal(size=(4, 3)) for _ in range(64)]
        for entry in ((0, 0), (3, 2), (1, 1)):
            report = diag.datawise_variance_check(inputs, params, cfg, entry)
            assert report.margin >= -1e-9

    def test_delta_t_tightens_rhs(self):
        cfg1 = peri_cfg(depth=8, dt=1.0)
        cfg01 = replace(cfg1, delta_t=0.1)
        params = random_model(cfg1, RngStream(10))
        gen = RngStream(11).generator()
        inputs = [gen.normal(size=(4, 3)) for _ in range(4)]
        r1 = diag.datawise_variance_check(inputs, params, cfg1, (0, 0))
        r01 = diag.datawise_variance_check(inputs, params, cfg01, (0, 0))
        frobs = [np.linalg.norm(x) for x in inputs]
        expected01 = np.mean([(f + 2 * 8 * 0.1 * np.sqrt(12) * (1 + 0)) ** 2 for f in frobs])
        assert r01.rhs == pytest.approx(expected01, rel=1e-12)
        assert r01.rhs < r1.rhs

    def test_needs_two_samples(self):
        cfg = peri_cfg()
        params = random_model(cfg, RngStream(12))
        with pytest.raises(ValueError, match="2 samples"):
            diag.datawise_variance_check([np.ones((4, 3))], params, cfg, (0, 0))


class TestPathwiseStability:
    def test_equal_inputs_zero_lhs(self):
        cfg = peri_cfg(depth=5)
        params = random_model(cfg, RngStream(13))
        x0 = RngStream(14).generator().normal(size=(4, 3))
        report = diag.pathwise_stability_check(x0, x0.copy(), params, cfg)
        assert report.lhs == 0.0

    def test_random_pairs_margin_nonnegative(self):
        reports = suites.run_pathwise_suite(40, seed=1)
        assert all(r.margin >= -1e-9 for r in reports)

    def test_gamma_zero_exact_translation(self):
        cfg = peri_cfg(depth=4, epsilon=1e-5)
        params = random_model(cfg, RngStream(15))
        for b in params:
            for site in ("attn_out", "ffn_out"):
                b.ln[site] = LNParams(np.zeros(4), b.ln[site].beta, 1e-5, "layernorm")
        gen = RngStream(16).generator()
        x0a, x0b = gen.normal(size=(4, 3)), gen.normal(size=(4, 3))
        report = diag.pathwise_stability_check(x0a, x0b, params, cfg)
        assert report.lhs == pytest.approx(np.linalg.norm(x0a - x0b), abs=1e-12)


class TestWassersteinStability:
    def test_equal_clouds_zero_lhs(self):
        cfg = peri_cfg(depth=3)
        params = random_model(cfg, RngStream(17))
        mu0 = RngStream(18).generator().normal(size=(6, 4, 3))
        report = diag.wasserstein_stability_check(mu0, mu0.copy(), params, cfg)
        assert report.lhs == pytest.approx(0.0, abs=1e-12)
        assert report.margin >= 0

    def test_random_clouds_margin_nonnegative(self):
        reports = suites.run_wasserstein_suite(8, seed=2, n_samples=16)
        assert all(r.margin >= -1e-9 for r in reports)

    def test_single_points_reduce_to_pathwise(self):
        cfg = peri_cfg(depth=4)
        params = random_model(cfg, RngStream(19))
        gen = RngStream(20).generator()
        a, b = gen.normal(size=(4, 3)), gen.normal(size=(4, 3))
        wrep = diag.wasserstein_stability_check(a[None], b[None], params, cfg, p=2.0)
        prep = diag.pathwise_stability_check(a, b, params, cfg)
        assert wrep.lhs == pytest.approx(prep.lhs, rel=1e-12)
        assert wrep.rhs == pytest.approx(np.sqrt(2.0) * prep.rhs, rel=1e-12)

    def test_lhs_softly_monotone_in_delta_t(self):
        # reflects the dt-scaled bound; exact monotonicity is not claimed
        hits = 0
        total = 50
        for seed in range(total):
            cfg1 = peri_cfg(depth=6)
            params = random_model(cfg1, RngStream(seed, 30))
            gen = RngStream(seed, 31).generator()
            mu0 = gen.normal(size=(8, 4, 3))
            nu0 = gen.normal(size=(8, 4, 3)) + 0.3
            lhs = []
            for dt in (1.0, 0.5, 0.1):
                cfg = replace(cfg1, delta_t=dt)
                lhs.append(diag.wasserstein_stability_check(mu0, nu0, params, cfg).lhs)
            hits += int(lhs[0] >= lhs[1] >= lhs[2])
        assert hits >= 0.9 * total


class TestCHat:
    def test_p2_is_one(self):
        assert diag.c_hat(2.0, 12) == 1.0

    def test_norm_equivalence_exponent(self):
        assert diag.c_hat(1.0, 16) == pytest.approx(4.0)
        assert diag.c_hat(4.0, 16) == pytest.approx(2.0)

    def test_invalid_p(self):
        with pytest.raises(ValueError):
            diag.c_hat(0.5, 4)


class TestRescaleInvariance:
    def test_unit_scales_are_exact_noop(self):
        cfg = peri_cfg(epsilon=0.0, activation="relu")
        params = random_model(cfg, RngStream(21))
        x = RngStream(22).generator().normal(size=(4, 3))
        for sub in ("attn", "ffn"):
            res = diag.rescale_invariance_test(params, cfg, x, 0, (1.0, 1.0), sub)
            assert res.max_abs_dev == 0.0

    def test_peri_suite_tolerances(self):
        exact = suites.run_rescale_suite(10, seed=3, epsilon=0.0)
        assert exact.worst_attn_dev <= 1e-10
        assert exact.worst_ffn_dev <= 1e-10
        smoothed = suites.run_rescale_suite(10, seed=3, epsilon=1e-5)
        assert smoothed.worst_attn_dev <= 1e-6
        assert smoothed.worst_ffn_dev <= 1e-6

    def test_pre_ratio_is_product_of_scales(self):
        exact = suites.run_rescale_suite(10, seed=4, epsilon=0.0)
        assert exact.worst_pre_ratio_err <= 1e-8

    def test_relu_sign_flip_rejected(self):
        cfg = peri_cfg(epsilon=0.0, activation="relu")
        params = random_model(cfg, RngStream(0))
        x = RngStream(1000).generator().normal(size=(4, 3))
        with pytest.raises(ActivationKinkError, match="tanh"):
            diag.rescale_invariance_test(params, cfg, x, 0, (-1.0, 1.0), "ffn")

    def test_post_placement_rejected(self):
        cfg = peri_cfg()
        post_cfg = replace(cfg, placement="post")
        params = random_model(post_cfg, RngStream(25))
        with pytest.raises(PlacementError):
            diag.rescale_invariance_test(params, post_cfg, np.ones((4, 3)), 0, (10.0, 10.0), "attn")


class TestPreExponentialAndWitness:
    def test_chain_suite_margins(self):
        reports = suites.run_chain_suite(25, seed=5)
        assert all(r.margin >= 0 for r in reports)
        assert all(r.check == "pre_exponential" for r in reports)

    def test_witness_ratios(self):
        outcomes = suites.divergence_witness(20)
        assert all(o.bound_margin >= 0 for o in outcomes)
        assert sum(o.ratio >= 10.0 for o in outcomes) >= 18


class TestDroBound:
    def test_zero_lipschitz(self):
        assert diag.dro_bound(1.7, 0.0, 5.0, 4, 1.0, 12, 0.3) == 1.7

    def test_zero_radius_zero_gamma(self):
        assert diag.dro_bound(2.5, 3.0, 0.0, 6, 0.5, 8, 0.0) == 2.5

    def test_hand_value(self):
        # 1 + 2 * (0.5 + 4 * 4 * 1 * sqrt(12) * 0.25), evaluated by hand
        got = diag.dro_bound(1.0, 2.0, 0.5, 4, 1.0, 12, 0.25, c_hat_1=1.0)
        assert got == pytest.approx(29.712812921102035, rel=1e-15)

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            diag.dro_bound(1.0, -2.0, 0.5, 4, 1.0, 12, 0.25)
