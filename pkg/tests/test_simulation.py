import dataclasses
import json
import os

import numpy as np
import pytest

from glucotrial import analytics
from glucotrial.analytics import build_trial_report, merge
from glucotrial.controller import DualHormoneController
from glucotrial.hovorka import IGSC, IQ1, nominal_values, pack_params, steady_state
from glucotrial.physiology import ModelDefinition, get_model
from glucotrial.population import ParameterSet
from glucotrial.protocol import Disturbance, Protocol
from glucotrial.rng import stream
from glucotrial.simulation import (
    TRACE_COLUMNS,
    FixedProtocol,
    NorthernYearProtocol,
    SimulationConfig,
    SimulationError,
    compile_protocol,
    euler_maruyama_step,
    load_trace,
    run_trial,
    save_trace,
    simulate_closed_loop,
    _simulate_arrays,
)
from glucotrial.storage import report_bytes

DAY = 86400.0


def _toy_model(drift_value=0.0, sigma=0.0, dim=2):
    """Constant-drift, constant-diffusion model for integrator unit tests."""
    return ModelDefinition(
        model_id="toy",
        state_dim=dim,
        wiener_dim=dim,
        state_names=tuple(f"s{i}" for i in range(dim)),
        param_names=(),
        drift=lambda t, x, u, d, p: np.full(dim, drift_value),
        diffusion=lambda t, x, u, d, p: np.eye(dim) * sigma,
        output=lambda t, x, p: float(x[0]),
        measure_mean=lambda t, x, p: float(x[0]),
        noise_variance=lambda p: 0.0,
        steady_state=lambda p, target: (np.full(dim, target), 0.0),
        pack_params=lambda v: np.zeros(0),
        unpack_params=lambda p: {},
    )


def _nominal_setup(profile, sigma=False, r_noise=False, weight=70.0):
    values = nominal_values(weight)
    if not sigma:
        values.update(sigma_egp=0.0, sigma_gut=0.0)
    if not r_noise:
        values.update(R=0.0)
    pset = ParameterSet(values=values, u_basal_u_per_h=0.0)
    p = pack_params(values)
    _, ub = steady_state(p, 6.0)
    pset.u_basal_u_per_h = ub
    return pset


class FakePatient:
    def __init__(self, pid, weight=70.0):
        self.id = pid
        self.body_weight_kg = weight


class TestEulerMaruyamaStep:
    def test_null_dynamics_is_identity(self, rng):
        model = _toy_model(0.0, 0.0)
        x = np.array([1.0, 2.0])
        out = euler_maruyama_step(model, x, None, None, None, 0.0, 30.0, rng)
        assert np.array_equal(out, x)

    def test_increment_moments(self):
        # f = 0, sigma = const: increments have variance sigma^2 * dt
        sigma = 0.7
        dt_min = 0.5
        model = _toy_model(0.0, sigma, dim=1)
        g = stream(3, 0)
        x = np.full(1, 100.0)
        n = 100_000
        increments = np.empty(n)
        for i in range(n):
            out = euler_maruyama_step(model, x, None, None, None, 0.0, 30.0, g)
            increments[i] = out[0] - x[0]
        var = increments.var(ddof=1)
        expected = sigma**2 * dt_min
        se = expected * np.sqrt(2.0 / (n - 1))
        assert abs(var - expected) < 3 * se
        assert abs(increments.mean()) < 3 * np.sqrt(expected / n)

    def test_projection_to_nonnegative(self, rng):
        model = _toy_model(-100.0, 0.0)
        out = euler_maruyama_step(model, np.array([0.1, 0.1]), None, None, None,
                                  0.0, 30.0, rng)
        assert np.all(out == 0.0)

    def test_nonfinite_raises(self, rng):
        model = _toy_model(np.inf, 0.0)
        with pytest.raises(SimulationError):
            euler_maruyama_step(model, np.zeros(2), None, None, None, 0.0, 30.0, rng)


class TestConfigValidation:
    def test_alignment_rules(self):
        with pytest.raises(SimulationError):
            SimulationConfig(horizon_s=1000.0, seed=0)  # not a period multiple
        with pytest.raises(SimulationError):
            SimulationConfig(horizon_s=DAY, seed=0, controller_period_s=45.0)
        with pytest.raises(SimulationError):
            SimulationConfig(horizon_s=DAY, seed=0, store_trace="sometimes")
        cfg = SimulationConfig(horizon_s=DAY, seed=0)
        assert cfg.horizon_ticks == 2880 and cfg.period_steps == 10
        assert cfg.n_days == 1 and cfg.n_grid == 24

    def test_engine_gate(self, profile):
        cfg = SimulationConfig(horizon_s=DAY, seed=0, engine="fast")
        pset = _nominal_setup(profile)
        toy = _toy_model()
        patient = FakePatient(0)
        proto = Protocol(id="empty", horizon_s=DAY, disturbances=[])
        ctl = DualHormoneController(profile, pset.u_basal_u_per_h)
        with pytest.raises(SimulationError):
            simulate_closed_loop(patient, pset, proto, ctl, toy, cfg)


class TestClosedLoop:
    def test_zero_disturbance_holds_setpoint(self, profile):
        # sigma = 0, R = 0, no meals: the closed loop is at a fixed point
        pset = _nominal_setup(profile)
        cfg = SimulationConfig(horizon_s=DAY, seed=1)
        ctl = DualHormoneController(profile, pset.u_basal_u_per_h)
        res = simulate_closed_loop(FakePatient(0), pset,
                                   Protocol(id="empty", horizon_s=DAY, disturbances=[]),
                                   ctl, get_model("hovorka_ext"), cfg, record_trace=True)
        assert res.status == "ok"
        bg = res.trace[:, 1]
        assert np.max(np.abs(bg - 6.0)) < 0.1

    def test_announced_meal_response(self, profile):
        pset = _nominal_setup(profile)
        cfg = SimulationConfig(horizon_s=DAY, seed=1)
        meal = Disturbance(kind="meal", start_s=6 * 3600.0, end_s=6 * 3600.0 + 900.0,
                           magnitude=90.0)
        proto = Protocol(id="one-meal", horizon_s=DAY, disturbances=[meal])
        ctl = DualHormoneController(profile, pset.u_basal_u_per_h)
        res = simulate_closed_loop(FakePatient(0), pset, proto, ctl,
                                   get_model("hovorka_ext"), cfg, record_trace=True)
        tr = res.trace
        bolus_ticks = np.nonzero(tr[:, 6] > 0)[0]
        assert len(bolus_ticks) >= 1
        t_bolus = tr[bolus_ticks[0], 0]
        assert abs(t_bolus - 6 * 3600.0) <= 300.0  # at the meal's controller tick
        # basal suspension follows the bolus
        suspended = tr[(tr[:, 0] > t_bolus) & (tr[:, 0] < t_bolus + profile.suspend_min * 60), 5]
        assert np.all(suspended == 0.0)
        # BG rises then returns toward setpoint
        peak = tr[:, 1].max()
        assert peak > 7.5
        assert abs(tr[-1, 1] - 6.0) < 1.5

    def test_bit_identical_repeat(self, profile):
        pset = _nominal_setup(profile, sigma=True, r_noise=True)
        cfg = SimulationConfig(horizon_s=2 * DAY, seed=9)
        gen = NorthernYearProtocol()
        patient = FakePatient(3)
        proto = gen.build(cfg.seed, patient)
        ctl = DualHormoneController(profile, pset.u_basal_u_per_h)
        model = get_model("hovorka_ext")
        r1 = simulate_closed_loop(patient, pset, proto, ctl, model, cfg, record_trace=True)
        r2 = simulate_closed_loop(patient, pset, proto, ctl, model, cfg, record_trace=True)
        assert np.array_equal(r1.trace, r2.trace)
        assert np.array_equal(r1.stats.bg_hist, r2.stats.bg_hist)
        assert r1.stats.sum_bg == r2.stats.sum_bg

    def test_fast_and_python_engines_agree(self, profile):
        pset = _nominal_setup(profile, sigma=True, r_noise=True)
        gen = NorthernYearProtocol()
        patient = FakePatient(5)
        cfg_fast = SimulationConfig(horizon_s=2 * DAY, seed=4, engine="fast")
        cfg_py = dataclasses.replace(cfg_fast, engine="python")
        proto = gen.build(cfg_fast.seed, patient)
        pa = compile_protocol(proto, cfg_fast.horizon_s)
        ctl = DualHormoneController(profile, pset.u_basal_u_per_h)
        model = get_model("hovorka_ext")
        rf = _simulate_arrays(patient.id, pset.values, pa, ctl, model, cfg_fast, True)
        rp = _simulate_arrays(patient.id, pset.values, pa, ctl, model, cfg_py, True)
        assert np.array_equal(rf.stats.tir_ticks, rp.stats.tir_ticks)
        assert np.array_equal(rf.stats.bg_hist, rp.stats.bg_hist)
        np.testing.assert_allclose(rf.trace, rp.trace, rtol=0, atol=1e-10)

    def test_trace_columns(self, profile):
        pset = _nominal_setup(profile)
        cfg = SimulationConfig(horizon_s=DAY, seed=1)
        ctl = DualHormoneController(profile, pset.u_basal_u_per_h)
        res = simulate_closed_loop(FakePatient(0), pset,
                                   Protocol(id="empty", horizon_s=DAY, disturbances=[]),
                                   ctl, get_model("hovorka_ext"), cfg, record_trace=True)
        assert res.trace.shape == (cfg.horizon_ticks, len(TRACE_COLUMNS))
        assert res.trace[0, 0] == 0.0 and res.trace[-1, 0] == DAY - cfg.dt_s

    def test_invalid_protocol_rejected(self, profile):
        pset = _nominal_setup(profile)
        cfg = SimulationConfig(horizon_s=DAY, seed=1)
        bad = Protocol(id="bad", horizon_s=DAY, disturbances=[
            Disturbance(kind="meal", start_s=100.0, end_s=50.0, magnitude=1.0)
        ])
        ctl = DualHormoneController(profile, pset.u_basal_u_per_h)
        with pytest.raises(SimulationError):
            simulate_closed_loop(FakePatient(0), pset, bad, ctl,
                                 get_model("hovorka_ext"), cfg)


class TestRunTrial:
    def _cfg(self, **kw):
        base = dict(horizon_s=2 * DAY, seed=33)
        base.update(kw)
        return SimulationConfig(**base)

    def test_singleton_trial_equals_single_simulation(self, small_population, profile):
        patient, pset = small_population[0]
        cfg = self._cfg()
        gen = NorthernYearProtocol()
        result = run_trial(small_population[:1], gen, "dual_hormone", profile,
                           "hovorka_ext", cfg, workers=1)
        single = simulate_closed_loop(
            patient, pset, gen.build(cfg.seed, patient),
            DualHormoneController(profile, pset.u_basal_u_per_h),
            get_model("hovorka_ext"), cfg, validate=False,
        )
        acc = result.accumulator
        assert np.array_equal(acc.tir_ticks_total, single.stats.tir_ticks)
        assert acc.min_bg == single.stats.min_bg
        assert acc.worst.patient_id == patient.id

    def test_worker_count_invariance(self, small_population, profile):
        cfg = self._cfg()
        gen = NorthernYearProtocol()
        reports = []
        for workers in (1, 3):
            res = run_trial(small_population, gen, "dual_hormone", profile,
                            "hovorka_ext", cfg, workers=workers)
            reports.append(report_bytes(res.report))
        assert reports[0] == reports[1]

    def test_merged_counts_equal_sequential_oracle(self, small_population, profile):
        cfg = self._cfg()
        gen = NorthernYearProtocol()
        result = run_trial(small_population, gen, "dual_hormone", profile,
                           "hovorka_ext", cfg, workers=1)
        model = get_model("hovorka_ext")
        total = np.zeros(5, dtype=np.int64)
        min_bgs = []
        for patient, pset in small_population:
            single = simulate_closed_loop(
                patient, pset, gen.build(cfg.seed, patient),
                DualHormoneController(profile, pset.u_basal_u_per_h), model, cfg,
                validate=False,
            )
            total += single.stats.tir_ticks
            min_bgs.append((single.stats.min_bg, patient.id))
        assert np.array_equal(result.accumulator.tir_ticks_total, total)
        assert result.accumulator.worst.min_bg == min(min_bgs)[0]

    def test_aborted_patient_excluded_and_reported(self, small_population, profile):
        population = [
            (p, ParameterSet(values=dict(ps.values), u_basal_u_per_h=ps.u_basal_u_per_h))
            for p, ps in small_population[:4]
        ]
        # an unstable sensor time constant diverges once noise seeds it
        population[2][1].values["tau_cgm"] = -1.0
        # and a production deficit makes this patient's steady state infeasible
        population[3][1].values["EGP0"] = 0.001
        cfg = self._cfg()
        res = run_trial(population, NorthernYearProtocol(), "dual_hormone", profile,
                        "hovorka_ext", cfg, workers=1)
        assert res.report["n_aborted"] == 2
        assert res.report["aborted_ids"] == sorted(
            [population[2][0].id, population[3][0].id]
        )
        assert res.report["n_patients"] == 2
        assert res.accumulator.worst.patient_id not in res.report["aborted_ids"]

    def test_store_trace_policies(self, small_population, profile, tmp_path):
        cfg = self._cfg(store_trace="worst_case_only")
        res = run_trial(small_population[:4], NorthernYearProtocol(), "dual_hormone",
                        profile, "hovorka_ext", cfg, workers=1)
        assert res.worst_trace is not None
        # the re-simulated worst trace reproduces the accumulated minimum
        assert res.worst_trace[:, 1].min() == res.accumulator.worst.min_bg

        trace_dir = tmp_path / "traces"
        cfg_always = self._cfg(store_trace="always")
        res2 = run_trial(small_population[:3], NorthernYearProtocol(), "dual_hormone",
                         profile, "hovorka_ext", cfg_always, workers=1,
                         trace_dir=str(trace_dir))
        files = sorted(os.listdir(trace_dir))
        assert len(files) == 3
        trace = load_trace(str(trace_dir / files[0]))
        assert trace.shape == (cfg_always.horizon_ticks, 8)

    def test_report_is_json_serializable_and_deterministic(self, small_population, profile):
        cfg = self._cfg()
        res1 = run_trial(small_population[:5], NorthernYearProtocol(), "dual_hormone",
                         profile, "hovorka_ext", cfg, workers=1)
        res2 = run_trial(small_population[:5], NorthernYearProtocol(), "dual_hormone",
                         profile, "hovorka_ext", cfg, workers=1)
        assert report_bytes(res1.report) == report_bytes(res2.report)
        parsed = json.loads(report_bytes(res1.report))
        assert parsed["schema"] == analytics.SCHEMA_REPORT

    def test_empty_population_rejected(self, profile):
        with pytest.raises(SimulationError):
            run_trial([], NorthernYearProtocol(), "dual_hormone", profile,
                      "hovorka_ext", self._cfg(), workers=1)


class TestProtocolGenerators:
    def test_fixed_protocol_passthrough(self):
        proto = Protocol(id="p", horizon_s=DAY, disturbances=[])
        gen = FixedProtocol(proto)
        assert gen.build(1, FakePatient(0)) is proto
        assert gen.describe()["kind"] == "fixed"

    def test_northern_year_deterministic_per_patient(self):
        gen = NorthernYearProtocol()
        a = gen.build(5, FakePatient(2, weight=80.0))
        b = gen.build(5, FakePatient(2, weight=80.0))
        c = gen.build(5, FakePatient(3, weight=80.0))
        assert [d.to_dict() for d in a.disturbances] == [d.to_dict() for d in b.disturbances]
        assert [d.to_dict() for d in a.disturbances] != [d.to_dict() for d in c.disturbances]


def test_trace_save_load_roundtrip(tmp_path):
    trace = np.arange(80.0).reshape(10, 8)
    path = str(tmp_path / "t.npz")
    save_trace(path, trace)
    assert np.array_equal(load_trace(path), trace)
