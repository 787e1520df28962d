import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hyperfc.disturbances import (N_MEAS, CoeffPerturbation, CommandDelay, SensorNoiseSpec,
                                  WindModel, _discretize, _shaping_filter, apply_sensor_noise,
                                  default_perturbation_bounds, delay_command, dryden_step,
                                  perturb_step, sample_steady_wind)


def test_steady_wind_bounds_and_heading_uniformity():
    rng = np.random.default_rng(0)
    w = np.array([sample_steady_wind(rng) for _ in range(10_000)])
    mag = np.linalg.norm(w, axis=1)
    assert np.all((mag >= 3.0) & (mag <= 5.0))
    assert np.all(w[:, 2] == 0.0)
    heading = np.mod(np.arctan2(w[:, 1], w[:, 0]), 2 * np.pi)
    counts, _ = np.histogram(heading, bins=36, range=(0, 2 * np.pi))
    assert stats.chisquare(counts).pvalue > 0.01


def test_steady_wind_is_reproducible():
    a = sample_steady_wind(np.random.default_rng(7))
    b = sample_steady_wind(np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_zero_intensity_gives_zero_gust():
    wind = WindModel(intensity_scale=0.0)
    rng = np.random.default_rng(0)
    assert all(np.array_equal(dryden_step(wind, rng), np.zeros(3)) for _ in range(100))


def test_gust_sequence_is_reproducible():
    seqs = []
    for _ in range(2):
        wind, rng = WindModel(), np.random.default_rng(3)
        seqs.append(np.array([dryden_step(wind, rng) for _ in range(500)]))
    assert np.array_equal(*seqs)


def test_discretization_against_fine_euler_covariance():
    # independent oracle: integrate the covariance ODE dP = A P + P A' + B B' finely
    A, B, _ = _shaping_filter(2.0, 100.0, 21.0, 2)
    dt = 0.04
    Phi, G = _discretize(A, B, dt)
    P, h = np.zeros((2, 2)), dt / 20_000
    for _ in range(20_000):
        P = P + h * (A @ P + P @ A.T + B @ B.T)
    assert np.allclose(G @ G.T, P, rtol=1e-3, atol=1e-12)
    assert np.allclose(Phi, __import__("scipy").linalg.expm(A * dt), atol=1e-14)


def test_long_run_gust_variance_matches_analytic():
    wind = WindModel()
    rng = np.random.default_rng(11)
    n = 1_000_000
    noise = rng.standard_normal((n, wind._G.shape[1]))
    s = np.zeros(wind._Phi.shape[0])
    out = np.empty((n, 3))
    Phi, G, C = wind._Phi, wind._G, wind._C
    drive = noise @ G.T
    for k in range(n):
        s = Phi @ s + drive[k]
        out[k] = C @ s
    var = out[1000:].var(axis=0)
    assert np.allclose(var, wind.analytic_variance(), rtol=0.10), (var, wind.analytic_variance())
    assert np.allclose(wind.analytic_variance(), wind.sigma**2, rtol=1e-9)


def test_gust_increments_are_bounded():
    wind, rng = WindModel(), np.random.default_rng(5)
    g = np.array([dryden_step(wind, rng) for _ in range(20_000)])
    # no resampling jumps: per-step change is small next to the gust spread
    assert np.max(np.abs(np.diff(g, axis=0))) < 2.0 * g.std(axis=0).max()


def test_zero_perturbation_bounds():
    pert = CoeffPerturbation(np.zeros(6), np.zeros(6))
    rng = np.random.default_rng(0)
    assert all(np.array_equal(perturb_step(pert, rng), np.zeros(6)) for _ in range(100))


def test_perturbation_trace_respects_bounds():
    pert = CoeffPerturbation(np.full(6, 0.05), np.full(6, 0.01))
    rng = np.random.default_rng(1)
    trace = np.array([np.zeros(6)] + [perturb_step(pert, rng) for _ in range(100_000)])
    assert np.max(np.abs(trace)) <= 0.05
    assert np.max(np.abs(np.diff(trace, axis=0))) <= 0.01 + 1e-15


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=6, max_size=6),
       st.lists(st.floats(0, 0.1), min_size=6, max_size=6), st.integers(0, 2**31))
def test_perturbation_bounds_property(mag, rate, seed):
    mag, rate = np.array(mag), np.array(rate)
    pert = CoeffPerturbation(mag, rate)
    rng = np.random.default_rng(seed)
    prev = np.zeros(6)
    for _ in range(200):
        cur = perturb_step(pert, rng)
        assert np.all(np.abs(cur) <= mag)
        assert np.all(np.abs(cur - prev) <= rate + 1e-15)
        prev = cur


def test_default_bounds():
    mag, rate = default_perturbation_bounds([0.5, -0.001, 0.0, 0.2, -0.3, 0.0])
    assert np.allclose(mag, [0.05, 0.01, 0.01, 0.02, 0.03, 0.01])
    assert np.allclose(rate, mag / 25)
    with pytest.raises(ValueError):
        CoeffPerturbation(-np.ones(6), np.ones(6))


def test_sensor_noise_defaults_and_identity():
    spec = SensorNoiseSpec()
    sd = spec.sd_vector()
    assert sd.shape == (N_MEAS,)
    assert (spec.omega, spec.V_r, spec.phi_theta, spec.psi, spec.chi) == (0.01, 2.0, 0.01, 0.1, 0.02)
    assert (spec.xy, spec.z, spec.f) == (0.03, 0.01, 0.03)
    m = np.arange(N_MEAS, dtype=float)
    assert np.array_equal(apply_sensor_noise(m, SensorNoiseSpec.off(), np.random.default_rng(0)), m)


def test_sensor_noise_psi_sd():
    rng = np.random.default_rng(2)
    draws = apply_sensor_noise(np.zeros((100_000, N_MEAS)), SensorNoiseSpec(), rng)
    assert abs(draws[:, 6].std() - 0.1) < 0.003
    assert abs(draws[:, 13].std() - 0.02) < 0.02 * 0.03


def test_delay_line():
    ref = np.array([9.0])
    assert [delay_command(CommandDelay(0, ref), [x])[0] for x in (1, 2, 3)] == [1, 2, 3]
    buf = CommandDelay(1, ref)
    assert [delay_command(buf, [x])[0] for x in (1, 2, 3)] == [9, 1, 2]
    with pytest.raises(ValueError):
        CommandDelay(2, ref)
    with pytest.raises(ValueError):
        delay_command(buf, [4.0], 0)
