"""Airframe parameter record and its flat key/value file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml


class ConfigError(ValueError):
    """Invalid or inconsistent configuration data."""


@dataclass(frozen=True)
class AirframeParams:
    name: str = "generic-3kg-stand-in"
    mass: float = 3.0
    g: float = 9.81
    rho: float = 1.225
    Jxx: float = 0.22
    Jyy: float = 0.28
    Jzz: float = 0.48
    Jxz: float = 0.015
    chord: float = 0.25
    span: float = 2.0
    area: float = 0.5
    D_prop: float = 0.28

    CL0: float = 0.15
    CL_alpha: float = 4.8
    CL_q: float = 5.0
    CL_de: float = 0.35
    CD0: float = 0.05
    CD_k: float = 0.06

    CY_beta: float = -0.3
    CY_p: float = 0.0
    CY_r: float = 0.15
    CY_da: float = 0.0
    CY_dr: float = 0.15

    Cl_beta: float = -0.08
    Cl_p: float = -0.45
    Cl_r: float = 0.08
    Cl_da: float = 0.2
    Cl_dr: float = 0.005

    Cm0: float = 0.02
    Cm_alpha: float = -0.9
    Cm_q: float = -10.0
    Cm_de: float = -1.0
    Cm_da_diff: float = -0.02

    Cn_beta: float = 0.06
    Cn_p: float = -0.03
    Cn_r: float = -0.08
    Cn_da: float = -0.01
    Cn_dr: float = -0.05

    CT0: float = 0.0
    CT1: float = -0.0314
    CT2: float = 0.0376

    tau_surface: float = 0.05
    tau_throttle: float = 0.2
    sat_surface: float = 0.4
    sat_throttle: float = 250.0

    V_min: float = 3.0

    # derived, filled in __post_init__
    J: np.ndarray = field(init=False, repr=False, compare=False)
    J_inv: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        J = np.array([[self.Jxx, 0.0, -self.Jxz],
                      [0.0, self.Jyy, 0.0],
                      [-self.Jxz, 0.0, self.Jzz]])
        for name in ("mass", "chord", "span", "area", "D_prop",
                     "tau_surface", "tau_throttle", "sat_surface", "sat_throttle"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"airframe: {name} must be > 0")
        # rho = 0 switches aerodynamics off (vacuum), V_min = 0 drops the floor
        for name in ("rho", "V_min"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"airframe: {name} must be >= 0")
        if np.any(np.linalg.eigvalsh(J) <= 0):
            raise ConfigError("airframe: inertia matrix is not positive definite")
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "J_inv", np.linalg.inv(J))

    # actuator channel order: elevator, left aileron, right aileron, rudder, throttle
    @property
    def delta_sat(self) -> np.ndarray:
        s = self.sat_surface
        return np.array([s, s, s, s, self.sat_throttle])

    @property
    def delta_min(self) -> np.ndarray:
        s = self.sat_surface
        return np.array([-s, -s, -s, -s, 0.0])

    @property
    def tau(self) -> np.ndarray:
        t = self.tau_surface
        return np.array([t, t, t, t, self.tau_throttle])

    # command channel order: elevator, aileron, rudder, throttle
    @property
    def cmd_max(self) -> np.ndarray:
        s = self.sat_surface
        return np.array([s, s, s, self.sat_throttle])

    @property
    def cmd_min(self) -> np.ndarray:
        s = self.sat_surface
        return np.array([-s, -s, -s, 0.0])

    def replace(self, **changes) -> "AirframeParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.init}


def _known_keys() -> set[str]:
    return {f.name for f in dataclasses.fields(AirframeParams) if f.init}


def load_airframe(path: str | Path | None = None) -> AirframeParams:
    """Load an airframe file; ``None`` gives the bundled stand-in airframe.

    Unknown keys are rejected so that typos do not silently fall back to
    defaults.
    """
    if path is None:
        text = resources.files("hyperfc.data").joinpath("airframe_default.yaml").read_text()
    else:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"airframe file not found: {path}")
        text = path.read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError("airframe file must be a flat key/value mapping")
    unknown = set(data) - _known_keys()
    if unknown:
        raise ConfigError(f"airframe: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key == "name":
            kwargs[key] = str(value)
        else:
            if isinstance(value, (dict, list)):
                raise ConfigError(f"airframe: {key} must be a scalar")
            kwargs[key] = float(value)
    return AirframeParams(**kwargs)
