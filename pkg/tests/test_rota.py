import math

import numpy as np
import pytest

from palpf import config
from palpf.core import LogLikResult, ObservationSeries, PompError, Scale, TimeGrid, simulate
from palpf.pal import pal_predict
from palpf.rota import (COMPARTMENTS, PARAM_NAMES, FixedAtStart, RotaVariant, Warmup, _mean_kernel,
                        build_rota_model, default_config, initial_condition_anomaly_report, mean_field_step,
                        rota_params, used_params, warmup_init)

ENTRY = tuple(default_config()["init"]["values"])
VARIANTS = ["EqEq", "EqOv", "OvOv"]


def run(model, params, x, weeks, rng, t0=0.0):
    out = []
    for w in range(weeks):
        x[:, len(COMPARTMENTS):] = 0
        x = model.advance(x, t0 + w, t0 + w + 1, params, rng)
        out.append(x.copy())
    return np.array(out)


class TestVariant:
    def test_names(self):
        assert RotaVariant.named("EqOv") == RotaVariant("Eq", "Ov")
        assert RotaVariant("Ov", "Eq").name == "OvEq"
        with pytest.raises(PompError):
            RotaVariant.named("Ov")

    def test_parameter_counts(self):
        assert len(used_params(RotaVariant.named("OvOv"))) == len(PARAM_NAMES)
        assert "sigma_p" not in used_params(RotaVariant.named("EqOv"))
        assert not {"rho1", "theta1"} & set(used_params(RotaVariant.named("EqEq"), Scale.RESCALED))

    def test_init_validation(self):
        with pytest.raises(PompError):
            FixedAtStart((1.0,) * 8)
        with pytest.raises(PompError):
            Warmup(ENTRY, 0.0)
        with pytest.raises(PompError):
            rota_params(rho1=0.0)
        with pytest.raises(PompError):
            rota_params(amplitude=1.0)


class TestDynamics:
    @pytest.mark.parametrize("name", VARIANTS)
    def test_conservation_and_integrality(self, name):
        model = build_rota_model(RotaVariant.named(name), FixedAtStart(ENTRY))
        p = rota_params(birth=0.0, death=0.0, sigma_p=0.3).as_dict()
        rng = np.random.default_rng(0)
        path = run(model, p, model.rinit(p, 50, rng), 60, rng)
        assert path.dtype.kind == "i"
        assert np.all(path >= 0)
        np.testing.assert_array_equal(path[:, :, :9].sum(axis=2), sum(ENTRY))
        assert np.all(path[:, :, 9] == 0)

    def test_no_transmission(self):
        init = list(ENTRY)
        init[1] = init[4] = init[7] = 0.0
        model = build_rota_model(RotaVariant.named("EqEq"), FixedAtStart(tuple(init)))
        p = rota_params(beta1=0.0, beta2=0.0, beta3=0.0, iota=0.0).as_dict()
        rng = np.random.default_rng(1)
        path = run(model, p, model.rinit(p, 20, rng), 30, rng)
        assert np.all(path[:, :, [1, 4, 7, 10, 11, 12]] == 0)
        lp = model.dmeasure(np.array([0.0, 3.0, 0.0]), path[-1], 30.0, p)
        assert np.all(lp == -math.inf)

    def test_single_pulse_matches_skeleton(self):
        # ten index cases in a fully susceptible population, no seasonality, births, waning or imports
        pops = np.array(ENTRY).reshape(3, 3).sum(axis=1)
        init = np.zeros(9)
        init[0::3] = pops
        init[0] -= 10
        init[1] = 10
        model = build_rota_model(RotaVariant.named("EqEq"), FixedAtStart(tuple(init)))
        p = rota_params(amplitude=0.0, birth=0.0, omega=0.0, iota=0.0).as_dict()
        rng = np.random.default_rng(2)
        mean = run(model, p, model.rinit(p, 500, rng), 80, rng)[:, :, :9].mean(axis=1)
        skel = [np.r_[init, 0.0]]
        for w in range(80):
            skel.append(mean_field_step(skel[-1], w, 1.0, p))
        skel = np.array(skel[1:])[:, :9]
        infected = skel[:, [1, 4, 7]].sum(axis=1)
        assert 5 < infected.argmax() < 75 and infected[-1] < 1e-2 * infected.max()
        err = np.abs(mean - skel).max(axis=0) / skel.max(axis=0)
        assert err.max() < 0.10

    def test_kernel_matches_skeleton(self):
        p = rota_params().as_dict()
        x = np.r_[np.array(ENTRY) * 1.3, 7.0]
        K = _mean_kernel(10.0, 1.0, p, x, None)
        np.testing.assert_allclose(K.sum(axis=1), 1.0, atol=1e-12)
        imm = np.zeros(10)
        imm[0] = p["birth"]
        np.testing.assert_allclose(pal_predict(x, K, imm), mean_field_step(x, 10.0, 1.0, p), rtol=1e-10)

    def test_kernel_matches_simulation_mean(self):
        model = build_rota_model(RotaVariant.named("EqEq"), FixedAtStart(ENTRY))
        p = rota_params().as_dict()
        rng = np.random.default_rng(3)
        J = 20000
        x = model.rinit(p, J, rng)
        after = model.advance(x, 0.0, 1.0, p, rng)[:, :10].astype(float)
        expect = mean_field_step(np.r_[ENTRY, 0.0], 0.0, 1.0, p)
        se = after.std(axis=0, ddof=1) / math.sqrt(J)
        ok = np.abs(after.mean(axis=0) - expect) <= 5 * se + 1e-9
        assert ok.all()

    def test_simulate_is_seeded(self, rota_default):
        model, p = rota_default
        a = simulate(model, p, TimeGrid.weekly(20), 11)[1]
        b = simulate(model, p, TimeGrid.weekly(20), 11)[1]
        np.testing.assert_array_equal(a.values, b.values)
        assert a.d == 3


class TestMeasurement:
    def test_rescaled_equals_raw_at_unit_reporting(self, rota_short):
        _, _, obs = rota_short
        p = rota_params(rho1=1.0, rho2=1.0, rho3=1.0).as_dict()
        rng = np.random.default_rng(4)
        for name in ("EqEq", "OvOv"):
            v = RotaVariant.named(name)
            raw, resc = build_rota_model(v, FixedAtStart(ENTRY)), build_rota_model(v, FixedAtStart(ENTRY), "rescaled")
            x = raw.advance(raw.rinit(p, 300, rng), 0.0, 1.0, p, rng)
            for y in obs.values[:5]:
                np.testing.assert_array_equal(raw.dmeasure(y, x, 1.0, p), resc.dmeasure(y, x, 1.0, p))

    def test_rescaled_rounds_data(self):
        model = build_rota_model(RotaVariant.named("EqEq"), FixedAtStart(ENTRY), "rescaled")
        p = rota_params().as_dict()
        x = model.rinit(p, 4, np.random.default_rng(0))
        x[:, 10:] = [[40, 50, 60]]
        np.testing.assert_array_equal(model.dmeasure(np.array([42.6, 50.2, 59.5]), x, 1.0, p),
                                      model.dmeasure(np.array([43.0, 50.0, 60.0]), x, 1.0, p))

    def test_degenerates_to_equidispersion(self, rota_short):
        _, _, obs = rota_short
        p = rota_params(sigma_p=0.0, theta1=1e12, theta2=1e12, theta3=1e12).as_dict()
        eq = build_rota_model(RotaVariant.named("EqEq"), FixedAtStart(ENTRY))
        ov = build_rota_model(RotaVariant.named("OvOv"), FixedAtStart(ENTRY))
        rng = np.random.default_rng(5)
        x = eq.advance(eq.rinit(p, 500, rng), 0.0, 1.0, p, rng)
        for y in obs.values[:10]:
            np.testing.assert_allclose(ov.dmeasure(y, x, 1.0, p), eq.dmeasure(y, x, 1.0, p), atol=1e-6)

    def test_negative_binomial_variance(self):
        model = build_rota_model(RotaVariant.named("EqOv"), FixedAtStart(ENTRY))
        p = rota_params(theta1=5.0).as_dict()
        x = np.zeros((100_000, 13), dtype=np.int64)
        x[:, 10] = 200
        y = model.rmeasure(x, 1.0, p, np.random.default_rng(6))[:, 0]
        assert y.mean() == pytest.approx(14.0, rel=0.02)
        assert y.var() == pytest.approx(14.0 + 14.0 ** 2 / 5.0, rel=0.04)


class TestWarmup:
    def test_tiny_warmup_near_entry(self, rota_default):
        model, p = rota_default
        res = warmup_init(model, p, 1.0 / 52.18, 0)
        state = res.state.compartments[:9]
        assert np.all(np.abs(state - np.array(ENTRY)) <= 0.05 * np.array(ENTRY) + 50)
        assert not res.extinct

    def test_seeds_differ_population_fixed(self, rota_default):
        model, _ = rota_default
        p = rota_params(birth=0.0, death=0.0)
        a, b = warmup_init(model, p, 2.0, 1), warmup_init(model, p, 2.0, 2)
        assert not np.array_equal(a.state.compartments, b.state.compartments)
        assert a.state.compartments[:9].sum() == b.state.compartments[:9].sum() == sum(ENTRY)
        assert a.final_year_mean.shape == (9,)

    def test_extinction_is_reported(self, rota_default):
        model, _ = rota_default
        p = rota_params(beta1=0.0, beta2=0.0, beta3=0.0, iota=0.0)
        res = warmup_init(model, p, 2.0, 0)
        assert res.extinct

    def test_invalid_years(self, rota_default):
        model, p = rota_default
        with pytest.raises(PompError):
            warmup_init(model, p, 0.0, 0)

    def test_six_and_twelve_years_agree(self):
        p = rota_params().as_dict()
        stats = []
        for years in (6.0, 12.0):
            model = build_rota_model(RotaVariant.named("OvOv"), Warmup(ENTRY, years))
            x = model.rinit(p, 200, np.random.default_rng(int(years)))[:, :9].astype(float)
            stats.append((x.mean(axis=0), x.std(axis=0, ddof=1) / math.sqrt(200)))
        (m6, s6), (m12, s12) = stats
        assert np.all(np.abs(m6 - m12) < 3 * np.hypot(s6, s12))

    def test_flows_start_at_zero(self):
        model = build_rota_model(RotaVariant.named("OvOv"), Warmup(ENTRY, 1.0))
        x = model.rinit(rota_params().as_dict(), 5, np.random.default_rng(0))
        assert np.all(x[:, 9:] == 0)


class TestAnomaly:
    def test_equal_conditionals(self):
        rep = initial_condition_anomaly_report(LogLikResult.from_conditionals([-2.0] * 30), 4)
        assert rep.flagged == [] and not rep.concentrated_early

    def test_constructed_outlier(self):
        rep = initial_condition_anomaly_report(LogLikResult.from_conditionals([-300.0] + [-3.0] * 29), 4)
        assert rep.flagged == [0]
        assert rep.concentrated_early

    def test_late_flags_not_early(self):
        cond = np.random.default_rng(0).normal(-3.0, 0.1, 100)
        cond[[60, 70, 80]] = -50.0
        rep = initial_condition_anomaly_report(LogLikResult.from_conditionals(cond), 10)
        assert rep.flagged == [60, 70, 80] and rep.n_early == 0
        assert not rep.concentrated_early and rep.p_value == 1.0
        assert set(rep.to_json()) >= {"flagged", "p_value", "concentrated_early"}

    def test_minus_infinity_is_flagged(self):
        rep = initial_condition_anomaly_report(LogLikResult.from_conditionals([-math.inf] + [-1.0] * 9), 2)
        assert rep.flagged == [0]

    def test_window_validated(self):
        with pytest.raises(PompError):
            initial_condition_anomaly_report(LogLikResult.from_conditionals([-1.0]), 0)


class TestConfig:
    def test_defaults_resolve(self):
        cfg = config.resolve({})
        assert cfg["model"] == "rota3" and cfg["variant"] == "OvOv" and cfg["params"]["rho1"] == 0.07
        model, params, grid = config.build({"variant": "EqEq", "n_obs": 10})
        assert model.name == "rota3-EqEq" and len(grid) == 10 and params["beta1"] == 3.0

    def test_inline_and_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"model": "hmm2", "params": {"p01": 0.4}}')
        assert config.load(str(path)) == config.load('{"model": "hmm2", "params": {"p01": 0.4}}')

    @pytest.mark.parametrize("cfg", [{"params": {"nope": 1.0}}, {"colour": "red"}, {"model": "sir9"},
                                     {"params": {"rho1": 2.0}}, {"variant": "XxYy"},
                                     {"init": {"type": "warmup", "entry": [1.0] * 9, "years": -1}},
                                     {"model": "hmm2", "params": {"z": 1.0}}])
    def test_rejects(self, cfg):
        with pytest.raises(config.ConfigError):
            config.build(cfg)

    def test_unreadable(self, tmp_path):
        with pytest.raises(config.ConfigError):
            config.load(str(tmp_path / "missing.json"))
        with pytest.raises(config.ConfigError):
            config.load("{not json")

    def test_toy_default_length(self):
        _, _, grid = config.build({"model": "immigration_death"})
        assert len(grid) == 30


def test_zero_counts_allowed_in_data():
    obs = ObservationSeries([1.0, 2.0], [[0, 0, 0], [1, 0, 2]])
    assert obs.count_zeros() == 4
