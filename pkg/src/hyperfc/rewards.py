"""Dense and banded rewards, and the control margin they depend on."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# tracking-error channel order: p, q, r, phi, theta, chi, x, y, z (body frame)
K1 = np.array([0.1] * 3 + [0.2] * 3 + [0.5] * 3)
K2 = np.array([1.0] * 3 + [5.0] * 3 + [0.37] * 3)
K3 = 0.02
K4 = 0.2
BARRIER_EPS = 1e-6

# banded reward: (tight, loose) per channel group
BAND_RATES = (0.05, 0.15)
BAND_ATTITUDE = (0.05, 0.15)
BAND_POSITION = (1.0, 3.0)


class ConfigurationError(ValueError):
    """Reference command at or beyond actuator saturation."""


@dataclass(frozen=True)
class RewardBreakdown:
    tracking: float
    barrier: float
    rate: float
    total: float
    banded: float | None = None


def control_margin(delta_cmd, delta_ref_cmd, delta_sat, delta_min=None) -> np.ndarray:
    """Element-wise distance of the command from saturation, 1 at the reference.

    ``delta_min`` defaults to ``-delta_sat``; pass it for channels whose lower
    limit is not symmetric (throttle).
    """
    delta_cmd = np.asarray(delta_cmd, dtype=float)
    ref = np.asarray(delta_ref_cmd, dtype=float)
    hi = np.asarray(delta_sat, dtype=float)
    lo = -hi if delta_min is None else np.asarray(delta_min, dtype=float)
    if np.any(ref >= hi) or np.any(ref <= lo):
        raise ConfigurationError("reference command must lie strictly inside the limits")
    upper = np.maximum(0.0, (hi - delta_cmd) / (hi - ref))
    lower = np.maximum(0.0, (delta_cmd - lo) / (ref - lo))
    return np.minimum(upper, lower)


def tracking_reward(y_bar) -> np.ndarray:
    y_bar = np.asarray(y_bar, dtype=float)
    return np.sum(K1 * np.exp(-K2 * np.abs(y_bar)), axis=-1)


def input_terms(m, delta_cmd, delta_cmd_prev, rate_scale=None):
    """Barrier and rate-penalty terms; ``rate_scale`` divides the command
    change per channel before squaring (default: none)."""
    m = np.asarray(m, dtype=float)
    barrier = K3 * np.sum(np.log(m + BARRIER_EPS), axis=-1)
    diff = np.asarray(delta_cmd, dtype=float) - np.asarray(delta_cmd_prev, dtype=float)
    if rate_scale is not None:
        diff = diff / np.asarray(rate_scale, dtype=float)
    rate = -K4 * np.sum(diff**2, axis=-1)
    return barrier, rate


def input_reward(m, delta_cmd, delta_cmd_prev, rate_scale=None) -> np.ndarray:
    barrier, rate = input_terms(m, delta_cmd, delta_cmd_prev, rate_scale)
    return barrier + rate


def banded_reward(y_bar, rates=BAND_RATES, attitude=BAND_ATTITUDE,
                  position=BAND_POSITION) -> np.ndarray:
    """1 per channel inside the tight band, 0.3 inside the loose band, else 0.

    Both band edges are inclusive.
    """
    e = np.abs(np.asarray(y_bar, dtype=float))
    tight = np.array([rates[0]] * 3 + [attitude[0]] * 3 + [position[0]] * 3)
    loose = np.array([rates[1]] * 3 + [attitude[1]] * 3 + [position[1]] * 3)
    score = np.where(e <= tight, 1.0, np.where(e <= loose, 0.3, 0.0))
    return np.sum(score, axis=-1)
