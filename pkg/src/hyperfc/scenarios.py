"""Actuator-failure scenarios: stuck failures for training and evaluation,
and the flutter protocol used for out-of-distribution evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LAMBDA_TRAIN = (0.0, -0.25, 0.25, -0.5, 0.5)
LAMBDA_EVAL = (0.0, -0.125, 0.125, -0.25, 0.25, -0.375, 0.375, -0.5, 0.5)
ACTUATORS = ("A_r", "A_l", "R")
ACTUATOR_NAMES = {"A_r": "R Ail.", "A_l": "L Ail.", "R": "Rudder"}

NOMINAL = "nominal"
STUCK_FULL = "stuck_full_episode"
STUCK_ONSET = "stuck_at_onset"
FLUTTER = "flutter"
KINDS = (NOMINAL, STUCK_FULL, STUCK_ONSET, FLUTTER)

FLUTTER_EXCURSION = 0.2


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = NOMINAL
    actuator: int = 0           # index into ACTUATORS
    level: float = 0.0          # stuck level, or flutter centre
    onset: int = 0              # N_fail
    duration: int = 0           # flutter window, steps
    schedule: tuple = field(default=())  # flutter: ((hold_steps, value), ...)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not 0 <= self.actuator < len(ACTUATORS):
            raise ValueError("actuator index out of range")
        if not -1.0 <= self.level <= 1.0:
            raise ValueError("stuck level must lie in [-1, 1]")


def failure_vector(actuator: int | None = None, level: float = 0.0) -> np.ndarray:
    """Packed ``[A_r fail, A_r val, A_l fail, A_l val, R fail, R val]``."""
    lam = np.zeros(6)
    if actuator is not None:
        lam[2 * actuator] = 1.0
        lam[2 * actuator + 1] = level
    return lam


def flutter_signal(spec: ScenarioSpec, k: int) -> np.ndarray:
    if spec.kind != FLUTTER:
        raise ValueError("flutter_signal needs a flutter scenario")
    if k < spec.onset or k >= spec.onset + spec.duration:
        return np.zeros(6)
    offset = k - spec.onset
    for hold, value in spec.schedule:
        if offset < hold:
            return failure_vector(spec.actuator, value)
        offset -= hold
    raise AssertionError("flutter schedule shorter than its window")


def failure_at(spec: ScenarioSpec, k: int) -> np.ndarray:
    """Failure vector in force at step ``k``."""
    if spec.kind == NOMINAL:
        return np.zeros(6)
    if spec.kind == STUCK_FULL:
        return failure_vector(spec.actuator, spec.level)
    if spec.kind == STUCK_ONSET:
        return failure_vector(spec.actuator, spec.level) if k >= spec.onset else np.zeros(6)
    return flutter_signal(spec, k)


def _onset(rng, horizon: int, lo=0.1, hi=0.9) -> int:
    return int(rng.integers(int(lo * horizon), max(int(hi * horizon), int(lo * horizon) + 1)))


def sample_training_scenario(rng: np.random.Generator, horizon: int = 750,
                             mixture=(1 / 3, 1 / 3, 1 / 3), levels=LAMBDA_TRAIN) -> ScenarioSpec:
    mixture = np.asarray(mixture, dtype=float)
    kind = (NOMINAL, STUCK_FULL, STUCK_ONSET)[int(rng.choice(3, p=mixture / mixture.sum()))]
    actuator = int(rng.integers(len(ACTUATORS)))
    level = float(rng.choice(levels))
    onset = _onset(rng, horizon)
    if kind == NOMINAL:
        return ScenarioSpec(NOMINAL, actuator, 0.0, onset)
    if kind == STUCK_FULL:
        return ScenarioSpec(STUCK_FULL, actuator, level, 0)
    return ScenarioSpec(STUCK_ONSET, actuator, level, onset)


def sample_static_scenario(rng: np.random.Generator, horizon: int = 750,
                           levels=LAMBDA_EVAL) -> ScenarioSpec:
    actuator = int(rng.integers(len(ACTUATORS)))
    level = float(rng.choice(levels))
    return ScenarioSpec(STUCK_ONSET, actuator, level, _onset(rng, horizon))


def sample_flutter_scenario(rng: np.random.Generator, horizon: int = 750, dt: float = 0.04,
                            levels=LAMBDA_EVAL, duration_s=(1.0, 10.0),
                            hold_s=(0.2, 1.0)) -> ScenarioSpec:
    actuator = int(rng.integers(len(ACTUATORS)))
    centre = float(rng.choice(levels))
    duration = int(round(rng.uniform(*duration_s) / dt))
    hold_lo, hold_hi = int(round(hold_s[0] / dt)), int(round(hold_s[1] / dt))
    lo = max(-1.0, centre - FLUTTER_EXCURSION)
    hi = min(1.0, centre + FLUTTER_EXCURSION)
    # holds tile the window exactly, each within [hold_lo, hold_hi]
    schedule = []
    remaining = duration
    while remaining > hold_hi:
        hold = int(rng.integers(hold_lo, min(hold_hi, remaining - hold_lo) + 1))
        schedule.append((hold, float(rng.uniform(lo, hi))))
        remaining -= hold
    schedule.append((remaining, float(rng.uniform(lo, hi))))
    latest = max(horizon - duration, int(0.1 * horizon) + 1)
    onset = int(rng.integers(int(0.1 * horizon), latest))
    return ScenarioSpec(FLUTTER, actuator, centre, onset, duration, tuple(schedule))
