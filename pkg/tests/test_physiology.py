import numpy as np
import pytest

from glucotrial import hovorka
from glucotrial.hovorka import (
    IGSC,
    IQ1,
    SteadyStateError,
    load_parameter_table,
    nominal_params,
    nominal_values,
    pack_params,
    steady_state,
    unpack_params,
)
from glucotrial.physiology import get_model, measure, registered_models
from glucotrial.rng import stream

from reference_model import STATE_KEYS, reference_drift_vector


@pytest.fixture(scope="module")
def model():
    return get_model("hovorka_ext")


@pytest.fixture(scope="module")
def nominal():
    values = nominal_values(70.0)
    return values, pack_params(values)


def _random_point(rng, values):
    x = np.zeros(hovorka.N_STATES)
    x[IQ1] = rng.uniform(10.0, 200.0)          # glucose masses
    x[hovorka.IQ2] = rng.uniform(0.0, 150.0)
    x[hovorka.IS1] = rng.uniform(0.0, 500.0)   # insulin on the way in
    x[hovorka.IS2] = rng.uniform(0.0, 500.0)
    x[hovorka.II] = rng.uniform(0.0, 60.0)
    x[hovorka.IX1] = rng.uniform(0.0, 0.2)
    x[hovorka.IX2] = rng.uniform(0.0, 0.1)
    x[hovorka.IX3] = rng.uniform(0.0, 1.5)
    x[hovorka.ID1] = rng.uniform(0.0, 400.0)
    x[hovorka.ID2] = rng.uniform(0.0, 400.0)
    x[IGSC] = rng.uniform(1.0, 25.0)
    x[hovorka.IZ1] = rng.uniform(0.0, 100.0)
    x[hovorka.IZ2] = rng.uniform(0.0, 50.0)
    x[hovorka.IE1] = rng.uniform(0.0, 1.0)
    x[hovorka.IE2] = rng.uniform(0.0, 1.0)
    x[hovorka.IE3] = rng.uniform(0.0, 0.5)
    u = np.array([rng.uniform(0, 50), rng.uniform(0, 400), rng.uniform(0, 40)])
    d = np.array([rng.uniform(0, 8), rng.uniform(0, 1)])
    return x, u, d


class TestDrift:
    def test_matches_independent_transcription(self, model, nominal, rng):
        values, p = nominal
        for _ in range(300):
            x, u, d = _random_point(rng, values)
            ours = model.drift(0.0, x, u, d, p)
            theirs = reference_drift_vector(x, u, d, values)
            np.testing.assert_allclose(ours, theirs, rtol=1e-12, atol=1e-14)

    def test_matches_transcription_for_random_parameters(self, model, rng):
        for _ in range(50):
            values = nominal_values(rng.uniform(40.0, 120.0))
            for name in ("EGP0", "F01", "k12", "SIT", "SID", "SIE", "ke", "VG"):
                values[name] *= rng.uniform(0.6, 1.4)
            p = pack_params(values)
            x, u, d = _random_point(rng, values)
            np.testing.assert_allclose(
                model.drift(0.0, x, u, d, p),
                reference_drift_vector(x, u, d, values),
                rtol=1e-12, atol=1e-14,
            )

    def test_steady_state_residual_is_zero(self, model, nominal):
        values, p = nominal
        x, ub = steady_state(p, 6.0)
        f = model.drift(0.0, x, np.array([ub * 1000 / 60, 0.0, 0.0]), np.zeros(2), p)
        assert np.max(np.abs(f) / np.maximum(1.0, np.abs(x))) <= 1e-9

    def test_cho_raises_gut_derivatives(self, model, nominal):
        values, p = nominal
        x, ub = steady_state(p, 6.0)
        f = model.drift(0.0, x, np.array([ub * 1000 / 60, 0.0, 0.0]),
                        np.array([5.0, 0.0]), p)
        assert f[hovorka.ID1] > 0.0
        assert f[hovorka.ID2] == 0.0  # second compartment moves once D1 fills

    def test_finite_on_random_points(self, model, nominal, rng):
        values, p = nominal
        for _ in range(100):
            x, u, d = _random_point(rng, values)
            assert np.all(np.isfinite(model.drift(0.0, x, u, d, p)))


class TestOutputAndMeasurement:
    def test_output_reads_plasma_glucose(self, model, nominal):
        values, p = nominal
        x, _ = steady_state(p, 6.0)
        assert model.output(0.0, x, p) == pytest.approx(6.0, abs=1e-9)

    def test_output_linear_in_glucose_mass(self, model, nominal, rng):
        values, p = nominal
        x, _, _ = _random_point(rng, values)
        doubled = x.copy()
        doubled[IQ1] *= 2.0
        assert model.output(0.0, doubled, p) == pytest.approx(2 * model.output(0.0, x, p))
        assert model.output(0.0, x, p) >= 0.0

    def test_measure_zero_noise_is_exact(self, model, nominal):
        values, p = nominal
        values_zero = dict(values, R=0.0)
        p0 = pack_params(values_zero)
        x, _ = steady_state(p0, 6.0)
        x[IGSC] = 5.4321
        assert measure(model, 0.0, x, p0, stream(1, 0)) == 5.4321

    def test_measure_noise_variance(self, model, nominal):
        values, _ = nominal
        p = pack_params(dict(values, R=0.04))
        x, _ = steady_state(p, 6.0)
        g = stream(7, 0)
        draws = np.array([measure(model, 0.0, x, p, g) for _ in range(100_000)])
        var = draws.var(ddof=1)
        se = 0.04 * np.sqrt(2.0 / (100_000 - 1))
        assert abs(var - 0.04) < 3 * se
        assert abs(draws.mean() - x[IGSC]) < 3 * np.sqrt(0.04 / 100_000)

    def test_sensor_state_lags_plasma_first_order(self, model, nominal):
        values, p = nominal
        x, ub = steady_state(p, 6.0)
        # step plasma glucose up; the sensor state approaches exponentially
        x[IQ1] = 9.0 * values["VG"] * values["weight_kg"]
        u = np.array([ub * 1000 / 60, 0.0, 0.0])
        tau = values["tau_cgm"]
        gap0 = 9.0 - x[IGSC]
        f = model.drift(0.0, x, u, np.zeros(2), p)
        assert f[IGSC] == pytest.approx(gap0 / tau)


class TestSteadyState:
    def test_target_is_met(self, nominal):
        _, p = nominal
        for target in (4.0, 6.0, 8.0):
            x, ub = steady_state(p, target)
            assert x[IQ1] / (p[hovorka.PVG] * p[hovorka.PW]) == pytest.approx(target, abs=1e-9)
            assert x[IGSC] == pytest.approx(target)
            assert ub > 0

    def test_more_sensitive_patient_needs_less_basal(self, nominal):
        values, _ = nominal
        basals = []
        for scale in (0.8, 1.0, 1.25, 1.6):
            v = dict(values)
            v["SIT"] *= scale
            v["SID"] *= scale
            v["SIE"] *= scale
            basals.append(steady_state(pack_params(v), 6.0)[1])
        assert all(a > b for a, b in zip(basals, basals[1:]))

    def test_infeasible_parameters_raise(self, nominal):
        values, _ = nominal
        v = dict(values)
        v["EGP0"] = v["F01"] * 0.5  # production below uptake: no basal holds 6
        with pytest.raises(SteadyStateError):
            steady_state(pack_params(v), 6.0)
        with pytest.raises(SteadyStateError):
            steady_state(pack_params(values), 0.0)


class TestDiffusionAndPacking:
    def test_zero_intensities_give_zero_matrix(self, model, nominal):
        values, _ = nominal
        p = pack_params(dict(values, sigma_egp=0.0, sigma_gut=0.0))
        x, _ = steady_state(p, 6.0)
        mat = model.diffusion(0.0, x, np.zeros(3), np.zeros(2), p)
        assert mat.shape == (model.state_dim, model.wiener_dim)
        assert np.all(mat == 0.0)

    def test_diffusion_rows(self, model, nominal, rng):
        values, p = nominal
        x, u, d = _random_point(rng, values)
        mat = model.diffusion(0.0, x, u, d, p)
        nonzero_rows = set(np.nonzero(np.any(mat != 0.0, axis=1))[0])
        assert nonzero_rows <= {IQ1, hovorka.ID1, hovorka.ID2}

    def test_pack_unpack_roundtrip(self, nominal):
        values, p = nominal
        assert unpack_params(pack_params(values)) == {k: float(v) for k, v in values.items()}
        with pytest.raises(ValueError):
            pack_params({"weight_kg": 70.0})

    def test_state_name_layout(self, model):
        assert model.state_dim == len(model.state_names) == 16
        assert model.wiener_dim == 3


def test_parameter_table_contents(table):
    assert table.model_id == "hovorka_ext"
    kinds = {name: spec.kind for name, spec in table.sampled.items()}
    assert kinds["EGP0"] == "normal" and kinds["SIT"] == "lognormal"
    spec = table.sampled["SIT"]
    # lognormal derived parameters reproduce the arithmetic moments
    mean = np.exp(spec.log_mu + spec.log_sigma**2 / 2)
    assert mean == pytest.approx(spec.mean, rel=1e-12)
    assert "R" in table.fixed and "tau_cgm" in table.fixed


def test_registry():
    assert "hovorka_ext" in registered_models()
    with pytest.raises(KeyError):
        get_model("no_such_model")
