"""Stochastic environment effects: wind, turbulence, sensor noise, delay and
aerodynamic coefficient perturbations.

Every function takes an explicit ``numpy.random.Generator``; nothing here
touches global random state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

KNOT = 0.514444
FT = 0.3048


def sample_steady_wind(rng: np.random.Generator, v_min: float = 3.0, v_max: float = 5.0) -> np.ndarray:
    """Horizontal inertial wind with uniform magnitude and uniform heading."""
    speed = rng.uniform(v_min, v_max)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    return np.array([speed * np.cos(heading), speed * np.sin(heading), 0.0])


# ---------------------------------------------------------------------------
# Dryden turbulence


def dryden_low_altitude(altitude_m: float, w20_mps: float = 30 * KNOT):
    """Intensities (m/s) and scale lengths (m) of the low-altitude Dryden model.

    Follows the MIL-F-8785C low-altitude relations, evaluated in feet.
    """
    h = max(altitude_m / FT, 10.0)
    sigma_w = 0.1 * w20_mps
    sigma_uv = sigma_w / (0.177 + 0.000823 * h) ** 0.4
    L_w = h * FT
    L_uv = h / (0.177 + 0.000823 * h) ** 1.2 * FT
    return np.array([sigma_uv, sigma_uv, sigma_w]), np.array([L_uv, L_uv, L_w])


def _shaping_filter(sigma: float, L: float, V: float, order: int):
    """Controllable state-space realization (A, B, C) of one Dryden axis.

    Driven by white noise of unit two-sided spectral density, the stationary
    output variance is ``sigma**2``.
    """
    a = V / L
    if order == 1:
        A = np.array([[-a]])
        B = np.array([[1.0]])
        C = np.array([[sigma * np.sqrt(2.0 * a)]])
        return A, B, C
    # shape (1 + sqrt3 s/a) / (1 + s/a)^2; gain gives variance sigma^2
    k = sigma * np.sqrt(3.0 * a)
    A = np.array([[0.0, 1.0], [-a * a, -2.0 * a]])
    B = np.array([[0.0], [1.0]])
    C = np.array([[k * a / np.sqrt(3.0), k]])
    return A, B, C


def _discretize(A, B, dt):
    """Exact discretization of ``dx = A x dt + B dW``: returns (Phi, chol(Qd))."""
    n = A.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = -A
    M[:n, n:] = B @ B.T
    M[n:, n:] = A.T
    E = expm(M * dt)
    Phi = E[n:, n:].T
    Qd = Phi @ E[:n, n:]
    Qd = 0.5 * (Qd + Qd.T)
    return Phi, np.linalg.cholesky(Qd + 1e-300 * np.eye(n))


def stationary_variance(A, B, C) -> float:
    """Output variance of the continuous filter under unit white noise."""
    from scipy.linalg import solve_continuous_lyapunov
    P = solve_continuous_lyapunov(A, -B @ B.T)
    return float((C @ P @ C.T)[0, 0])


@dataclass
class WindModel:
    """Steady wind plus three independent Dryden shaping filters.

    Gust components are produced along the inertial north, east and down
    axes.
    """

    steady: np.ndarray = field(default_factory=lambda: np.zeros(3))
    altitude: float = 50.0
    airspeed: float = 21.0
    w20: float = 30 * KNOT
    intensity_scale: float = 1.0
    dt: float = 0.04

    def __post_init__(self):
        self.steady = np.asarray(self.steady, dtype=float)
        sigma, L = dryden_low_altitude(self.altitude, self.w20)
        self.sigma = sigma * self.intensity_scale
        self.scale_length = L
        self._filters = [_shaping_filter(self.sigma[axis], L[axis], self.airspeed, order)
                         for axis, order in enumerate((1, 2, 2))]
        # the three axes stacked block-diagonally: 5 states, 5 noise inputs
        n = sum(A.shape[0] for A, _, _ in self._filters)
        self._Phi = np.zeros((n, n))
        self._G = np.zeros((n, n))
        self._C = np.zeros((3, n))
        j = 0
        for axis, (A, B, C) in enumerate(self._filters):
            k = A.shape[0]
            Phi, G = _discretize(A, B, self.dt)
            self._Phi[j:j + k, j:j + k] = Phi
            self._G[j:j + k, j:j + k] = G
            self._C[axis, j:j + k] = C[0]
            j += k
        self.reset()

    def reset(self):
        self.dryden_state = np.zeros(self._Phi.shape[0])

    def analytic_variance(self) -> np.ndarray:
        return np.array([stationary_variance(A, B, C) for A, B, C in self._filters])


def dryden_step(wind: WindModel, rng: np.random.Generator) -> np.ndarray:
    """Advance the shaping filters by ``wind.dt``; returns the gust vector."""
    s = wind._Phi @ wind.dryden_state + wind._G @ rng.standard_normal(wind._G.shape[1])
    wind.dryden_state = s
    return wind._C @ s


# ---------------------------------------------------------------------------
# coefficient perturbations


@dataclass
class CoeffPerturbation:
    magnitude: np.ndarray
    rate: np.ndarray
    value: np.ndarray = None

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude, dtype=float)
        self.rate = np.asarray(self.rate, dtype=float)
        if self.value is None:
            self.value = np.zeros(6)
        if np.any(self.magnitude < 0) or np.any(self.rate < 0):
            raise ValueError("perturbation bounds must be non-negative")


def default_perturbation_bounds(trim_coefficients, fraction: float = 0.1,
                                floor: float = 0.01, steps_to_bound: float = 25.0):
    mag = np.maximum(fraction * np.abs(np.asarray(trim_coefficients, dtype=float)), floor)
    return mag, mag / steps_to_bound


def perturb_step(pert: CoeffPerturbation, rng: np.random.Generator) -> np.ndarray:
    """Bounded random walk: the increment is clipped to the rate bound, then
    the value to the magnitude bound."""
    step = np.minimum(np.maximum(rng.standard_normal(6) * pert.rate, -pert.rate), pert.rate)
    pert.value = np.minimum(np.maximum(pert.value + step, -pert.magnitude), pert.magnitude)
    return pert.value.copy()


# ---------------------------------------------------------------------------
# sensor noise


# channel layout of the noisy measurement: omega(3), V_r, phi, theta, psi,
# x, y, z, f(3), chi
N_MEAS = 14


@dataclass(frozen=True)
class SensorNoiseSpec:
    omega: float = 0.01
    V_r: float = 2.0
    phi_theta: float = 0.01
    psi: float = 0.1
    chi: float = 0.02
    xy: float = 0.03
    z: float = 0.01
    f: float = 0.03

    def sd_vector(self) -> np.ndarray:
        sd = np.array([self.omega] * 3 + [self.V_r] + [self.phi_theta] * 2 + [self.psi]
                      + [self.xy] * 2 + [self.z] + [self.f] * 3 + [self.chi])
        if np.any(sd < 0):
            raise ValueError("noise standard deviations must be non-negative")
        return sd

    @classmethod
    def off(cls) -> "SensorNoiseSpec":
        return cls(0, 0, 0, 0, 0, 0, 0, 0)


def apply_sensor_noise(measurement, spec: SensorNoiseSpec, rng: np.random.Generator) -> np.ndarray:
    measurement = np.asarray(measurement, dtype=float)
    sd = spec.sd_vector()
    return measurement + sd * rng.standard_normal(measurement.shape)


# ---------------------------------------------------------------------------
# command delay


class CommandDelay:
    """Delay line holding at most one past command."""

    def __init__(self, delay_steps: int, reference_cmd):
        if delay_steps not in (0, 1):
            raise ValueError("delay_steps must be 0 or 1")
        self.delay_steps = delay_steps
        self._held = np.asarray(reference_cmd, dtype=float).copy()

    def __call__(self, cmd) -> np.ndarray:
        cmd = np.asarray(cmd, dtype=float)
        if self.delay_steps == 0:
            return cmd.copy()
        out, self._held = self._held, cmd.copy()
        return out


def delay_command(buffer: CommandDelay, cmd, delay_steps: int | None = None) -> np.ndarray:
    if delay_steps is not None and delay_steps != buffer.delay_steps:
        raise ValueError("delay is fixed for the lifetime of a buffer")
    return buffer(cmd)
