import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from palpf.core import ObservationSeries, ParameterSet, PompError, TimeGrid, simulate
from palpf.pal import (CgdSettings, PalSettings, cgd_maximize, initial_belief, pal_filter, pal_predict,
                       pal_update)
from palpf.pf import PfSettings, pfilter
from palpf.toys import (deterministic_model, deterministic_params, hmm2_model, hmm2_params,
                        immigration_death_model, immigration_death_params)

from oracles import deterministic_exact, immigration_death_exact


class TestPredict:
    def test_identity_kernel(self):
        np.testing.assert_array_equal(pal_predict([3.0, 4.0], np.eye(2), [0.0, 0.0]), [3.0, 4.0])

    def test_moves_mass(self):
        out = pal_predict([10.0, 0.0], [[0.25, 0.75], [0.0, 1.0]], [1.0, 0.0])
        np.testing.assert_allclose(out, [3.5, 7.5])

    @pytest.mark.parametrize("K,imm", [([[0.5, 0.6], [0, 1]], [0, 0]), ([[1.2, -0.2], [0, 1]], [0, 0]),
                                       ([[1, 0], [0, 1]], [-1, 0])])
    def test_invalid(self, K, imm):
        with pytest.raises(PompError):
            pal_predict([1.0, 1.0], K, imm)

    @given(st.lists(st.floats(0, 1e4), min_size=3, max_size=3), st.integers(0, 2 ** 31))
    def test_total_preserved(self, belief, seed):
        K = np.random.default_rng(seed).dirichlet(np.ones(3), size=3)
        K /= K.sum(axis=1, keepdims=True)
        assert pal_predict(belief, K, np.zeros(3)).sum() == pytest.approx(sum(belief), rel=1e-12, abs=1e-9)


class TestUpdate:
    def test_poisson_score_and_shift(self):
        new, ll = pal_update([5.0, 40.0], 20.0, 3, 0.1, None, 1)
        assert ll == pytest.approx(stats.poisson.logpmf(3, 2.0))
        np.testing.assert_allclose(new, [5.0, 41.0])

    def test_negative_binomial(self):
        _, ll = pal_update([5.0, 40.0], 20.0, 3, 0.5, 4.0, 1)
        assert ll == pytest.approx(stats.nbinom.logpmf(3, 4.0, 4.0 / 14.0))

    def test_zero_count_is_ordinary(self):
        new, ll = pal_update([5.0, 40.0], 20.0, 0, 0.07, None, 1)
        assert math.isfinite(ll)
        assert ll == pytest.approx(-1.4)
        assert new[1] == pytest.approx(38.6)

    def test_floor(self):
        new, _ = pal_update([5.0, 1.0], 20.0, 0, 1.0, None, 1, rate_floor=1e-6)
        assert new[1] == 1e-6

    @pytest.mark.parametrize("kw", [dict(reporting=0.0), dict(reporting=1.5), dict(dispersion=0.0), dict(y=1.5),
                                    dict(y=-1), dict(mu=-1.0)])
    def test_invalid(self, kw):
        args = dict(belief=[1.0, 1.0], mu=1.0, y=1, reporting=0.5, dispersion=None)
        args.update(kw)
        with pytest.raises(PompError):
            pal_update(args["belief"], args["mu"], args["y"], args["reporting"], args["dispersion"], 1)


class TestFilter:
    def test_requires_structure(self):
        model, params = hmm2_model(), hmm2_params()
        obs = ObservationSeries([1.0], [[1.0]])
        with pytest.raises(PompError, match="plug-and-play"):
            pal_filter(model, obs, params)

    def test_exact_on_immigration_death(self):
        model = immigration_death_model()
        rng = np.random.default_rng(1)
        for i in range(5):
            p = immigration_death_params(alpha=rng.uniform(1, 8), s=rng.uniform(0.2, 0.9),
                                         rho=rng.uniform(0.1, 0.9), lambda0=rng.uniform(1, 10))
            _, obs = simulate(model, p, TimeGrid.weekly(15), i)
            assert pal_filter(model, obs, p).total == pytest.approx(
                immigration_death_exact(obs.values[:, 0], p.as_dict()), abs=1e-8)

    def test_deterministic_toy_matches_pf(self):
        model, params = deterministic_model(), deterministic_params()
        _, obs = simulate(model, params, TimeGrid.weekly(10), 4)
        pal = pal_filter(model, obs, params)
        pf = pfilter(model, obs, params, PfSettings(J=10, seed=0))
        assert pal.total == pytest.approx(deterministic_exact(obs.values[:, 0], params.as_dict()), abs=1e-9)
        assert pal.total == pytest.approx(pf.total, abs=1e-9)
        assert pal.ess is None

    def test_zero_counts(self):
        model, params = immigration_death_model(), immigration_death_params(rho=0.05)
        obs = ObservationSeries(np.arange(1.0, 13.0), np.zeros((12, 1)))
        r = pal_filter(model, obs, params)
        assert math.isfinite(r.total)

    def test_deterministic_given_seed(self, rota_short):
        model, params, obs = rota_short
        a = pal_filter(model, obs, params, PalSettings(noise_draws=5, seed=3))
        b = pal_filter(model, obs, params, PalSettings(noise_draws=5, seed=3))
        c = pal_filter(model, obs, params, PalSettings(noise_draws=5, seed=4))
        assert a.total == b.total
        assert a.total != c.total
        assert a.diagnostics["noise_draws"] == 5

    def test_initial_belief_from_draws(self):
        model, params = hmm2_model(), hmm2_params()
        b = initial_belief(model, params.as_dict(), 0)
        assert b[0] == pytest.approx(0.5, abs=0.02)

    def test_settings_validation(self):
        with pytest.raises(PompError):
            PalSettings(noise_draws=0)
        with pytest.raises(PompError):
            PalSettings(rate_floor=0.0)


class TestCgd:
    def test_empty_free_list(self):
        start = ParameterSet({"a": 1.0})
        res = cgd_maximize(None, None, start, [], objective=lambda p: -(p["a"] - 3) ** 2)
        assert res.params is start
        assert res.loglik == res.start_loglik == -4.0

    def test_quadratic(self):
        start = ParameterSet({"a": 1.0, "b": 0.5, "c": 9.0}, {"b": "logit"})
        res = cgd_maximize(None, None, start, ["a", "b"], CgdSettings(tolerance=1e-12, max_sweeps=200),
                           objective=lambda p: -(p["a"] - 3) ** 2 - 10 * (p["b"] - 0.2) ** 2)
        assert res.params["a"] == pytest.approx(3.0, abs=1e-3)
        assert res.params["b"] == pytest.approx(0.2, abs=1e-3)
        assert res.params["c"] == 9.0
        assert res.loglik >= res.start_loglik
        logliks = [row["loglik"] for row in res.trace]
        assert all(b >= a for a, b in zip(logliks, logliks[1:]))

    def test_start_is_maximum(self):
        start = ParameterSet({"a": 3.0})
        res = cgd_maximize(None, None, start, ["a"], objective=lambda p: -(p["a"] - 3) ** 2)
        assert res.params is start

    def test_unknown_parameter(self):
        with pytest.raises(PompError, match="unknown"):
            cgd_maximize(None, None, ParameterSet({"a": 1.0}), ["b"], objective=lambda p: 0.0)

    def test_non_finite_start(self):
        with pytest.raises(PompError, match="not finite"):
            cgd_maximize(None, None, ParameterSet({"a": 1.0}), ["a"], objective=lambda p: -math.inf)

    def test_pal_objective_improves(self):
        model = immigration_death_model()
        truth = immigration_death_params()
        _, obs = simulate(model, truth, TimeGrid.weekly(60), 8)
        start = truth.with_values(alpha=1.5)
        res = cgd_maximize(model, obs, start, ["alpha"])
        assert res.loglik > res.start_loglik
        assert res.loglik == pytest.approx(pal_filter(model, obs, res.params).total)
        assert abs(res.params["alpha"] - 4.0) < 1.5
