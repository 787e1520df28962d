"""Six-degree-of-freedom fixed-wing dynamics.

States are packed as ``x = [p(3), v(3), theta(3), omega(3)]`` with position
in the inertial NED frame, velocities and rates in the body frame and the
attitude as (roll, pitch, yaw) Euler angles. Actuator outputs are kept
separately as ``delta = [elevator, left aileron, right aileron, rudder,
throttle]`` because they are advanced at the control rate, not inside the
integrator.

Every array function accepts an optional leading batch axis so that a whole
set of environments can be advanced with one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .airframe import AirframeParams

N_STATE = 12
N_DELTA = 5

# actuator output indices
D_E, D_AL, D_AR, D_R, D_T = range(N_DELTA)
# failure-vector actuator order (right aileron, left aileron, rudder) -> output index
FAIL_CHANNELS = (D_AR, D_AL, D_R)


class LowAirspeedError(ArithmeticError):
    """Airspeed fell below the validity floor of the aerodynamic model."""


class IntegrationError(ArithmeticError):
    """The integrator produced a non-finite state."""


class UndefinedCourseError(ValueError):
    """Course and flight-path angles are undefined for zero velocity."""


@dataclass
class AircraftState:
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta: np.ndarray = field(default_factory=lambda: np.zeros(N_DELTA))

    def __post_init__(self):
        for name in ("p", "v", "theta", "omega", "delta"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).copy())

    def packed(self) -> np.ndarray:
        return np.concatenate([self.p, self.v, self.theta, self.omega])

    @classmethod
    def from_packed(cls, x, delta=None) -> "AircraftState":
        x = np.asarray(x, dtype=float)
        return cls(x[0:3], x[3:6], x[6:9], x[9:12],
                   np.zeros(N_DELTA) if delta is None else delta)

    def copy(self) -> "AircraftState":
        return AircraftState(self.p, self.v, self.theta, self.omega, self.delta)


@dataclass(frozen=True)
class AeroOutputs:
    V_r: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    qbar: np.ndarray
    C: np.ndarray
    F: np.ndarray
    M: np.ndarray


def rotation_body_to_inertial(theta) -> np.ndarray:
    """R_Ib for ZYX Euler angles; shape (..., 3, 3)."""
    theta = np.asarray(theta, dtype=float)
    cf, sf = np.cos(theta[..., 0]), np.sin(theta[..., 0])
    ct, st = np.cos(theta[..., 1]), np.sin(theta[..., 1])
    cp, sp = np.cos(theta[..., 2]), np.sin(theta[..., 2])
    R = np.empty(theta.shape[:-1] + (3, 3))
    R[..., 0, 0] = ct * cp
    R[..., 0, 1] = sf * st * cp - cf * sp
    R[..., 0, 2] = cf * st * cp + sf * sp
    R[..., 1, 0] = ct * sp
    R[..., 1, 1] = sf * st * sp + cf * cp
    R[..., 1, 2] = cf * st * sp - sf * cp
    R[..., 2, 0] = -st
    R[..., 2, 1] = sf * ct
    R[..., 2, 2] = cf * ct
    return R


def euler_rate_matrix(phi, theta) -> np.ndarray:
    """Matrix mapping body rates to Euler angle rates; singular at |theta| = pi/2."""
    phi = np.asarray(phi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    cf, sf = np.cos(phi), np.sin(phi)
    ct, tt = np.cos(theta), np.tan(theta)
    E = np.zeros(np.broadcast(phi, theta).shape + (3, 3))
    E[..., 0, 0] = 1.0
    E[..., 0, 1] = sf * tt
    E[..., 0, 2] = cf * tt
    E[..., 1, 1] = cf
    E[..., 1, 2] = -sf
    E[..., 2, 1] = sf / ct
    E[..., 2, 2] = cf / ct
    return E


def _matvec(R, x):
    return np.einsum("...ij,...j->...i", R, x)


def _rmatvec(R, x):
    return np.einsum("...ji,...j->...i", R, x)


def air_relative_velocity(state: AircraftState, wind_inertial) -> np.ndarray:
    """Body-frame air-relative velocity ``v - R_Ib^T w``."""
    R = rotation_body_to_inertial(state.theta)
    return state.v - _rmatvec(R, np.asarray(wind_inertial, dtype=float))


def aero_angles(v_r, V_min: float = 3.0):
    """Airspeed, angle of attack and sideslip of a body-frame air velocity.

    Raises :class:`LowAirspeedError` below ``V_min`` (any batch element).
    """
    v_r = np.asarray(v_r, dtype=float)
    V = np.linalg.norm(v_r, axis=-1)
    if np.any(~(V > V_min)):
        raise LowAirspeedError(f"airspeed below {V_min} m/s")
    return _angles(v_r, V)


def _angles(v_r, V):
    u, w = v_r[..., 0], v_r[..., 2]
    if np.all(u != 0.0):
        alpha = np.arctan(w / u)
    else:
        # zero axial flow is only reachable with V_min = 0
        alpha = np.where(u != 0.0, np.arctan(w / np.where(u != 0.0, u, 1.0)), np.arctan2(w, u))
    V_div = np.where(V > 0.0, V, 1.0)
    beta = np.arcsin(np.clip(v_r[..., 1] / V_div, -1.0, 1.0))
    return V, alpha, beta


def aero_coefficients(alpha, beta, omega_hat, delta, J_adv, perturb, af: AirframeParams) -> np.ndarray:
    """Six body-axis coefficients ``[C_X, C_Y, C_Z, C_L, C_M, C_N]``.

    ``omega_hat`` holds the nondimensional rates (p b/2V, q c/2V, r b/2V).
    ``J_adv`` is the inverse advance ratio ``delta_T D / V``. The perturbation
    is added after the model, channel by channel.
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    omega_hat = np.asarray(omega_hat, dtype=float)
    delta = np.asarray(delta, dtype=float)
    ph, qh, rh = omega_hat[..., 0], omega_hat[..., 1], omega_hat[..., 2]
    de, dr = delta[..., D_E], delta[..., D_R]
    da_eff = 0.5 * (delta[..., D_AL] + delta[..., D_AR])
    da_diff = delta[..., D_AR] - delta[..., D_AL]

    CL = af.CL0 + af.CL_alpha * alpha + af.CL_q * qh + af.CL_de * de
    CD = af.CD0 + af.CD_k * CL**2
    ca, sa = np.cos(alpha), np.sin(alpha)
    C_thrust = af.CT0 + af.CT1 * J_adv + af.CT2 * J_adv**2

    C = np.empty(np.broadcast(alpha, beta, ph, de).shape + (6,))
    C[..., 0] = -CD * ca + CL * sa + C_thrust
    C[..., 1] = af.CY_beta * beta + af.CY_p * ph + af.CY_r * rh + af.CY_da * da_eff + af.CY_dr * dr
    C[..., 2] = -CD * sa - CL * ca
    C[..., 3] = af.Cl_beta * beta + af.Cl_p * ph + af.Cl_r * rh + af.Cl_da * da_eff + af.Cl_dr * dr
    C[..., 4] = (af.Cm0 + af.Cm_alpha * alpha + af.Cm_q * qh + af.Cm_de * de
                 + af.Cm_da_diff * da_diff)
    C[..., 5] = af.Cn_beta * beta + af.Cn_p * ph + af.Cn_r * rh + af.Cn_da * da_eff + af.Cn_dr * dr
    return C + np.asarray(perturb, dtype=float)


def _aero(x, delta, wind, perturb, af: AirframeParams, strict: bool):
    theta = x[..., 6:9]
    v = x[..., 3:6]
    omega = x[..., 9:12]
    R = rotation_body_to_inertial(theta)
    v_r = v - _rmatvec(R, wind)
    V = np.linalg.norm(v_r, axis=-1)
    low = ~(V > af.V_min) if af.V_min > 0.0 else ~np.isfinite(V)
    if np.any(low):
        if strict:
            raise LowAirspeedError(f"airspeed below {af.V_min} m/s")
        # keep the arithmetic finite for invalid batch members; callers mask them
        v_r = np.where(low[..., None], np.array([af.V_min * 2, 0.0, 0.0]), v_r)
        V = np.where(low, af.V_min * 2, V)
    V, alpha, beta = _angles(v_r, V)
    # at zero airspeed (V_min = 0 only) the regressors are moot: qbar is zero
    V_div = np.where(V > 0.0, V, 1.0)
    scale = np.stack([af.span, af.chord, af.span]) / (2.0 * V_div[..., None])
    omega_hat = omega * scale
    J_adv = delta[..., D_T] * af.D_prop / V_div
    C = aero_coefficients(alpha, beta, omega_hat, delta, J_adv, perturb, af)
    qbar = 0.5 * af.rho * V**2
    qS = (qbar * af.area)[..., None]
    F = qS * C[..., 0:3]
    M = qS * C[..., 3:6] * np.array([af.span, af.chord, af.span])
    return R, AeroOutputs(V, alpha, beta, qbar, C, F, M), low


def aero_outputs(state: AircraftState, wind, perturb, af: AirframeParams) -> AeroOutputs:
    _, out, _ = _aero(state.packed(), state.delta, np.asarray(wind, float),
                      np.asarray(perturb, float), af, strict=True)
    return out


def packed_derivative(x, delta, wind, perturb, af: AirframeParams, strict: bool = True):
    """Time derivative of packed states.

    With ``strict=False`` low-airspeed members do not raise; the returned
    boolean mask marks them instead. Returns ``(xdot, aero, low_mask)``.
    """
    x = np.asarray(x, dtype=float)
    R, aero, low = _aero(x, delta, wind, perturb, af, strict)
    v = x[..., 3:6]
    theta = x[..., 6:9]
    omega = x[..., 9:12]
    xdot = np.empty_like(x)
    xdot[..., 0:3] = _matvec(R, v)
    gravity_body = af.g * R[..., 2, :]
    xdot[..., 3:6] = np.cross(v, omega) + gravity_body + aero.F / af.mass
    E = euler_rate_matrix(theta[..., 0], theta[..., 1])
    xdot[..., 6:9] = _matvec(E, omega)
    Jw = omega @ af.J.T
    xdot[..., 9:12] = (np.cross(Jw, omega) + aero.M) @ af.J_inv.T
    return xdot, aero, low


def state_derivative(state: AircraftState, wind, perturb, af: AirframeParams) -> AircraftState:
    """Derivative of (p, v, theta, omega) returned in an AircraftState shell.

    The ``delta`` field of the result is zero: actuators are not integrated
    here.
    """
    xdot, _, _ = packed_derivative(state.packed(), state.delta, np.asarray(wind, float),
                                   np.asarray(perturb, float), af, strict=True)
    return AircraftState.from_packed(xdot)


def specific_force(aero: AeroOutputs, af: AirframeParams) -> np.ndarray:
    """Accelerometer reading (non-gravitational acceleration), body frame."""
    return aero.F / af.mass


def saturate(delta, af: AirframeParams) -> np.ndarray:
    return np.clip(delta, af.delta_min, af.delta_sat)


def expand_command(delta_cmd) -> np.ndarray:
    """Map the 4-channel command (E, A, R, T) onto the 5 actuator outputs."""
    delta_cmd = np.asarray(delta_cmd, dtype=float)
    return delta_cmd[..., [0, 1, 1, 2, 3]]


def actuator_step(delta, delta_cmd, lam, dt: float, af: AirframeParams) -> np.ndarray:
    """Advance actuator outputs one control step.

    Healthy channels follow the exact first-order response toward the
    saturated command. A channel flagged as failed jumps to its stuck level
    ``lambda_val * delta_sat`` regardless of the command.
    """
    delta = np.asarray(delta, dtype=float)
    lam = np.asarray(lam, dtype=float)
    target = saturate(expand_command(delta_cmd), af)
    decay = np.exp(-dt / af.tau)
    out = target + (delta - target) * decay
    for k, ch in enumerate(FAIL_CHANNELS):
        failed = lam[..., 2 * k] >= 0.5
        stuck = lam[..., 2 * k + 1] * af.delta_sat[ch]
        out[..., ch] = np.where(failed, stuck, out[..., ch])
    return saturate(out, af)


def rk4_packed(x, delta, wind, perturb, dt: float, af: AirframeParams, strict: bool = True):
    """Classical RK4 on packed states; returns ``(x_next, bad_mask)``.

    ``bad_mask`` flags members with low airspeed at any stage or a non-finite
    result. With ``strict=True`` these raise instead.
    """
    k1, _, l1 = packed_derivative(x, delta, wind, perturb, af, strict)
    k2, _, l2 = packed_derivative(x + 0.5 * dt * k1, delta, wind, perturb, af, strict)
    k3, _, l3 = packed_derivative(x + 0.5 * dt * k2, delta, wind, perturb, af, strict)
    k4, _, l4 = packed_derivative(x + dt * k3, delta, wind, perturb, af, strict)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    bad = l1 | l2 | l3 | l4 | ~np.all(np.isfinite(x_next), axis=-1)
    if strict and np.any(bad):
        raise IntegrationError("non-finite state after RK4 step")
    return x_next, bad


def rk4_step(state: AircraftState, wind, perturb, dt: float, af: AirframeParams) -> AircraftState:
    x_next, _ = rk4_packed(state.packed(), state.delta, np.asarray(wind, float),
                           np.asarray(perturb, float), dt, af, strict=True)
    return AircraftState.from_packed(x_next, state.delta)


def path_angles(p_dot):
    """Flight-path angle and course angle of an inertial velocity."""
    p_dot = np.asarray(p_dot, dtype=float)
    horizontal = np.hypot(p_dot[..., 0], p_dot[..., 1])
    if np.any((horizontal == 0.0) & (p_dot[..., 2] == 0.0)):
        raise UndefinedCourseError("zero velocity has no course")
    gamma = np.arctan2(-p_dot[..., 2], horizontal)
    chi = np.arctan2(p_dot[..., 1], p_dot[..., 0])
    return gamma, chi
