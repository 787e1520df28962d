"""Path-following environment with actuator-failure injection.

:class:`FlightEnv` holds ``num_envs`` independent members that are stepped
together; a single environment is simply ``num_envs=1``. Each episode owns a
private random generator seeded at reset, so any episode can be replayed from
its seed alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import rewards
from .airframe import AirframeParams
from .disturbances import (CoeffPerturbation, SensorNoiseSpec, WindModel,
                           default_perturbation_bounds, dryden_step, perturb_step,
                           sample_steady_wind)
from .dynamics import (actuator_step, expand_command, packed_derivative,
                       rk4_packed, rotation_body_to_inertial, specific_force)
from .reference import (REF_COLUMNS, ReferencePath, advance_reference, sample_path,
                        trim_table)
from .scenarios import (LAMBDA_TRAIN, ScenarioSpec, failure_at, sample_training_scenario)

N_OBS_STATE = 34
N_LAMBDA = 6
N_ACTION = 4

CAUSE_DIVERGENCE = "divergence"
CAUSE_OFF_PATH = "off_path"
CAUSE_PATH_COMPLETE = "path_complete"
CAUSE_HORIZON = "horizon"
TRUNCATIONS = (CAUSE_PATH_COMPLETE, CAUSE_HORIZON)

# observation scales (value / scale, then clip)
SCALE_RATE = 2.0
SCALE_AIRSPEED = 10.0
SCALE_PHI_THETA = 1.0
SCALE_POSITION = 25.0
SCALE_ACCEL = 20.0
SCALE_KAPPA = 0.02
SCALE_GAMMA = 0.21
PITCH_LIMIT = 1.5


class ProtocolError(RuntimeError):
    """Environment used out of order (e.g. stepping a finished episode)."""


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass
class EnvConfig:
    dt: float = 0.04
    horizon: int = 750
    termination_distance: float = 25.0
    wind: bool = True
    gusts: bool = True
    sensor_noise: bool = True
    delay: bool = True
    coeff_perturbation: bool = True
    reward_mode: str = "dense"
    mixture: tuple = (1 / 3, 1 / 3, 1 / 3)
    train_levels: tuple = LAMBDA_TRAIN
    failures: bool = True
    lookahead: int = 1
    max_advance: int = 3
    path_min_duration: float | None = None
    straight_only: bool = False
    level_only: bool = False
    dryden_altitude: float = 50.0
    initial_offset: float = 0.0
    perturb_fraction: float = 0.1
    perturb_floor: float = 0.01
    perturb_steps_to_bound: float = 25.0

    def __post_init__(self):
        if self.reward_mode not in ("dense", "banded"):
            raise ValueError("reward_mode must be 'dense' or 'banded'")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        self.mixture = tuple(float(m) for m in self.mixture)
        self.train_levels = tuple(float(v) for v in self.train_levels)

    @classmethod
    def quiet(cls, **kw) -> "EnvConfig":
        """No wind, gusts, noise, delay, perturbation or failures."""
        base = dict(wind=False, gusts=False, sensor_noise=False, delay=False,
                    coeff_perturbation=False, failures=False)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mixture"] = list(self.mixture)
        d["train_levels"] = list(self.train_levels)
        return d


def action_to_command(action, ref_cmd, af: AirframeParams) -> np.ndarray:
    """Scale a [-1, 1] policy output to the headroom around the reference."""
    a = np.clip(np.asarray(action, dtype=float), -1.0, 1.0)
    ref = np.asarray(ref_cmd, dtype=float)
    headroom = np.minimum(af.cmd_max - ref, ref - af.cmd_min)
    return np.clip(ref + a * headroom, af.cmd_min, af.cmd_max)


def _cmd_normalized(cmd, af: AirframeParams):
    mid = 0.5 * (af.cmd_max + af.cmd_min)
    half = 0.5 * (af.cmd_max - af.cmd_min)
    return (cmd - mid) / half


def rate_scale(af: AirframeParams) -> np.ndarray:
    """Per-channel divisor for the command-rate penalty: surfaces in rad,
    throttle as a fraction of its limit."""
    return np.array([1.0, 1.0, 1.0, af.sat_throttle])


def build_observation(meas, ref, delta_cmd_prev, lam, af: AirframeParams):
    """Assemble the normalized 34-element state part and the 6-element
    failure part.

    ``meas`` has columns omega(3), V_r, phi, theta, psi, x, y, z, f(3), chi.
    ``ref`` maps ``omega, V, attitude, pos, f, chi, delta_cmd, kappa, gamma``
    to arrays with the same leading shape.
    """
    meas = np.atleast_2d(np.asarray(meas, dtype=float))
    n = meas.shape[0]
    g = lambda key: np.reshape(np.asarray(ref[key], dtype=float), (n, -1))
    att = meas[:, 4:7]
    pos_err = meas[:, 7:10] - g("pos")
    R = rotation_body_to_inertial(att)
    body_err = np.einsum("nji,nj->ni", R, pos_err)
    att_err = att - g("attitude")
    att_err[:, 2] = wrap_angle(att_err[:, 2])
    chi = meas[:, 13]
    chi_err = chi - g("chi")[:, 0]
    prev = np.reshape(np.asarray(delta_cmd_prev, dtype=float), (n, 4))
    ref_cmd = g("delta_cmd")
    m = rewards.control_margin(prev, ref_cmd, af.cmd_max, af.cmd_min)
    obs = np.concatenate([
        (meas[:, 0:3] - g("omega")) / SCALE_RATE,
        (meas[:, 3:4] - g("V")) / SCALE_AIRSPEED,
        att_err[:, 0:2] / SCALE_PHI_THETA,
        att_err[:, 2:3] / np.pi,
        body_err / SCALE_POSITION,
        (meas[:, 10:13] - g("f")) / SCALE_ACCEL,
        _cmd_normalized(ref_cmd, af),
        _cmd_normalized(prev, af),
        2.0 * m - 1.0,
        g("kappa") / SCALE_KAPPA,
        g("gamma") / SCALE_GAMMA,
        pos_err / SCALE_POSITION,
        np.stack([np.sin(chi), np.cos(chi)], axis=1),
        np.stack([np.sin(chi_err), np.cos(chi_err)], axis=1),
    ], axis=1)
    lam = np.reshape(np.asarray(lam, dtype=float), (n, N_LAMBDA))
    return np.clip(obs, -1.0, 1.0), np.clip(lam, -1.0, 1.0)


def reference_record(path: ReferencePath, idx) -> dict:
    idx = np.asarray(idx)
    return {
        "omega": path.omega[idx], "V": path.speed[idx], "attitude": path.attitude[idx],
        "pos": path.pos[idx], "f": path.specific_force[idx], "chi": path.chi[idx],
        "delta_cmd": path.delta_cmd[idx], "kappa": path.kappa[idx], "gamma": path.gamma[idx],
    }


@dataclass
class _Member:
    rng: np.random.Generator
    seed: int
    path: ReferencePath
    scenario: ScenarioSpec
    wind: WindModel | None
    steady: np.ndarray
    pert: CoeffPerturbation | None
    delay_steps: int
    held_cmd: np.ndarray
    errors: list = field(default_factory=list)
    ret: float = 0.0
    log: list | None = None


class FlightEnv:
    """Vectorized path-following environment.

    ``reset`` and ``step`` return ``(obs_state, lam, ...)`` with a leading
    ``num_envs`` axis. With ``auto_reset`` a finished member is immediately
    restarted; the observation that ended its episode is kept in
    ``info["terminal_obs"]``.
    """

    def __init__(self, config: EnvConfig | None = None, airframe: AirframeParams | None = None,
                 num_envs: int = 1, seed: int = 0,
                 scenario_sampler: Callable | None = None, auto_reset: bool = True,
                 record: bool = False):
        self.cfg = config or EnvConfig()
        self.af = airframe or AirframeParams()
        self.num_envs = num_envs
        self.auto_reset = auto_reset
        self.record = record
        self.trims = trim_table(self.af)
        level = self.trims[(0.0, 0.0)]
        self.pert_mag, self.pert_rate = default_perturbation_bounds(
            level.coefficients, self.cfg.perturb_fraction, self.cfg.perturb_floor,
            self.cfg.perturb_steps_to_bound)
        self.noise = SensorNoiseSpec() if self.cfg.sensor_noise else SensorNoiseSpec.off()
        self._noise_sd = self.noise.sd_vector()
        self.scenario_sampler = scenario_sampler or self._training_scenario
        self._seeders = [np.random.default_rng(s)
                         for s in np.random.SeedSequence(seed).spawn(num_envs)]
        n = num_envs
        self.x = np.zeros((n, 12))
        self.delta = np.zeros((n, 5))
        self.cmd_prev = np.zeros((n, 4))
        self.idx = np.zeros(n, dtype=int)
        self.k = np.zeros(n, dtype=int)
        self.lam = np.zeros((n, N_LAMBDA))
        self.dC = np.zeros((n, 6))
        self.done = np.ones(n, dtype=bool)
        self.members: list[_Member | None] = [None] * n
        self.finished_logs: list = []
        self._obs = np.zeros((n, N_OBS_STATE))

    # ------------------------------------------------------------------ setup

    def _training_scenario(self, rng, horizon):
        if not self.cfg.failures:
            return ScenarioSpec()
        return sample_training_scenario(rng, horizon, self.cfg.mixture, self.cfg.train_levels)

    def _path_duration(self) -> float:
        if self.cfg.path_min_duration is not None:
            return self.cfg.path_min_duration
        return 1.5 * self.cfg.horizon * self.cfg.dt + 5.0

    def reset(self, seeds=None):
        for i in range(self.num_envs):
            self.reset_member(i, None if seeds is None else seeds[i])
        return self._obs.copy(), self.lam.copy()

    def reset_member(self, i: int, episode_seed: int | None = None,
                     scenario: ScenarioSpec | None = None, path: ReferencePath | None = None):
        """Start a new episode in member ``i``; returns its (obs, lam)."""
        cfg, af = self.cfg, self.af
        if episode_seed is None:
            episode_seed = int(self._seeders[i].integers(2**63 - 1))
        rng = np.random.default_rng(episode_seed)
        if path is None:
            path = sample_path(rng, af, self._path_duration(), cfg.dt,
                               straight_only=cfg.straight_only, level_only=cfg.level_only)
        if scenario is None:
            scenario = self.scenario_sampler(rng, cfg.horizon)
        steady = sample_steady_wind(rng) if cfg.wind else np.zeros(3)
        wind = (WindModel(steady=steady, altitude=cfg.dryden_altitude, dt=cfg.dt)
                if cfg.gusts else None)
        pert = CoeffPerturbation(self.pert_mag, self.pert_rate) if cfg.coeff_perturbation else None
        delay_steps = int(rng.integers(2)) if cfg.delay else 0
        ref_cmd = path.delta_cmd[0]
        m = _Member(rng=rng, seed=episode_seed, path=path, scenario=scenario, wind=wind,
                    steady=steady, pert=pert, delay_steps=delay_steps, held_cmd=ref_cmd.copy(),
                    log=[] if self.record else None)
        self.members[i] = m

        state = path.state_at(0)
        x = state.packed()
        if cfg.initial_offset > 0:
            x[0:3] += rng.uniform(-cfg.initial_offset, cfg.initial_offset, 3)
        lam = failure_at(scenario, 0)
        self.x[i] = x
        self.delta[i] = actuator_step(expand_command(ref_cmd), ref_cmd, lam, 0.0, af)
        self.cmd_prev[i] = ref_cmd
        self.idx[i] = 0
        self.k[i] = 0
        self.lam[i] = lam
        self.dC[i] = 0.0
        self.done[i] = False
        meas, _, _ = self._measure(np.array([i]), steady[None])
        self._obs[i] = self._observe(np.array([i]), meas)[0]
        return self._obs[i].copy(), self.lam[i].copy()

    # --------------------------------------------------------------- stepping

    def _wind_now(self, members):
        return np.array([self.members[i].steady for i in members])

    def _measure(self, members, wind):
        """True measurement rows (no noise) plus aero outputs for ``members``."""
        x = self.x[members]
        xdot, aero, low = packed_derivative(x, self.delta[members], wind, self.dC[members],
                                            self.af, strict=False)
        chi = np.arctan2(xdot[:, 1], xdot[:, 0])
        meas = np.concatenate([x[:, 9:12], aero.V_r[:, None], x[:, 6:9], x[:, 0:3],
                               specific_force(aero, self.af), chi[:, None]], axis=1)
        return meas, xdot, low

    def _ref(self, members):
        rows = np.array([self.members[i].path.table[self.idx[i]] for i in members])
        ref = {key: rows[:, sl] for key, sl in REF_COLUMNS.items()}
        for key in ("V", "chi", "kappa", "gamma"):
            ref[key] = ref[key][:, 0]
        return ref

    def _observe(self, members, true_meas):
        noisy = true_meas.copy()
        for row, i in enumerate(members):
            noisy[row] += self._noise_sd * self.members[i].rng.standard_normal(noisy.shape[1])
        obs, _ = build_observation(noisy, self._ref(members), self.cmd_prev[members],
                                   self.lam[members], self.af)
        return obs

    def tracking_errors(self, members, true_meas):
        """The nine reward channels (rates, attitude with course, body-frame
        position) from noise-free measurements."""
        ref = self._ref(members)
        y = np.empty((len(members), 9))
        y[:, 0:3] = true_meas[:, 0:3] - ref["omega"]
        y[:, 3:5] = true_meas[:, 4:6] - ref["attitude"][:, 0:2]
        y[:, 5] = wrap_angle(true_meas[:, 13] - ref["chi"])
        R = rotation_body_to_inertial(true_meas[:, 4:7])
        y[:, 6:9] = np.einsum("nji,nj->ni", R, true_meas[:, 7:10] - ref["pos"])
        return y

    def step(self, action):
        action = np.atleast_2d(np.asarray(action, dtype=float))
        if action.shape != (self.num_envs, N_ACTION):
            raise ValueError(f"action must have shape ({self.num_envs}, {N_ACTION})")
        if np.any(self.done):
            raise ProtocolError("step called on a finished episode; reset it first")
        cfg, af = self.cfg, self.af
        n = self.num_envs
        members = np.arange(n)

        # reference progress from the pre-step position
        complete = np.zeros(n, dtype=bool)
        ref_cmd = np.empty((n, 4))
        for i in members:
            ref_cmd[i] = self.members[i].path.delta_cmd[self.idx[i]]
        cmd = action_to_command(action, ref_cmd, af)
        margin = rewards.control_margin(cmd, ref_cmd, af.cmd_max, af.cmd_min)
        barrier, rate = rewards.input_terms(margin, cmd, self.cmd_prev, rate_scale(af))
        for i in members:
            new_idx, complete[i] = advance_reference(self.members[i].path, self.x[i, 0:3],
                                                     self.idx[i], cfg.lookahead, cfg.max_advance)
            self.idx[i] = new_idx

        applied = np.empty((n, 4))
        wind = np.empty((n, 3))
        for i in members:
            m = self.members[i]
            if m.delay_steps:
                applied[i], m.held_cmd = m.held_cmd, cmd[i].copy()
            else:
                applied[i] = cmd[i]
            self.lam[i] = failure_at(m.scenario, self.k[i])
            wind[i] = m.steady
            if m.wind is not None:
                wind[i] = wind[i] + dryden_step(m.wind, m.rng)
            if m.pert is not None:
                self.dC[i] = perturb_step(m.pert, m.rng)
        self.delta = actuator_step(self.delta, applied, self.lam, cfg.dt, af)
        x_next, bad = rk4_packed(self.x, self.delta, wind, self.dC, cfg.dt, af, strict=False)
        bad |= np.abs(x_next[:, 7]) > PITCH_LIMIT
        x_next[:, 6] = wrap_angle(x_next[:, 6])
        x_next[:, 8] = wrap_angle(x_next[:, 8])
        self.x = np.where(bad[:, None], self.x, x_next)
        self.k += 1
        self.cmd_prev = cmd

        true_meas, _, low = self._measure(members, wind)
        bad |= low
        y_bar = self.tracking_errors(members, true_meas)
        tracking = rewards.tracking_reward(y_bar)
        banded = rewards.banded_reward(y_bar)
        main = banded if cfg.reward_mode == "banded" else tracking
        total = np.where(bad, 0.0, main + barrier + rate)
        ref_pos = np.array([self.members[i].path.pos[self.idx[i]] for i in members])
        pos_err = np.linalg.norm(self.x[:, 0:3] - ref_pos, axis=1)
        obs = self._observe(members, true_meas)

        causes = [None] * n
        for i in members:
            if bad[i]:
                causes[i] = CAUSE_DIVERGENCE
            elif pos_err[i] > cfg.termination_distance:
                causes[i] = CAUSE_OFF_PATH
            elif complete[i]:
                causes[i] = CAUSE_PATH_COMPLETE
            elif self.k[i] >= cfg.horizon:
                causes[i] = CAUSE_HORIZON
        done = np.array([c is not None for c in causes])
        truncated = np.array([c in TRUNCATIONS for c in causes])

        info = {
            "pos_error": pos_err, "cause": causes, "truncated": truncated,
            "tracking": np.where(bad, 0.0, tracking), "barrier": np.where(bad, 0.0, barrier),
            "rate": np.where(bad, 0.0, rate), "banded": banded, "y_bar": y_bar,
            "terminal_obs": obs.copy(), "terminal_lam": self.lam.copy(), "episodes": [],
        }
        for i in members:
            m = self.members[i]
            m.errors.append(float(pos_err[i]))
            m.ret += float(total[i])
            if m.log is not None:
                m.log.append(self._log_record(i, action[i], cmd[i], obs[i], info, total[i],
                                              causes[i], ref_pos[i]))
        self._obs = obs
        self.done = done.copy()
        for i in np.flatnonzero(done):
            m = self.members[i]
            errs = np.asarray(m.errors)
            info["episodes"].append({
                "env": int(i), "seed": m.seed, "return": m.ret, "length": int(self.k[i]),
                "cause": causes[i], "mpe": float(errs.mean()), "maxpe": float(errs.max()),
                "scenario": asdict(m.scenario),
            })
            if m.log is not None:
                self.finished_logs.append(m.log)
            if self.auto_reset:
                self.reset_member(i)
        return self._obs.copy(), self.lam.copy(), total, done, info

    def _log_record(self, i, action, cmd, obs, info, total, cause, ref_pos):
        m = self.members[i]
        return {
            "k": int(self.k[i]), "t": float(self.k[i] * self.cfg.dt),
            "p": self.x[i, 0:3].tolist(), "v": self.x[i, 3:6].tolist(),
            "theta": self.x[i, 6:9].tolist(), "omega": self.x[i, 9:12].tolist(),
            "delta": self.delta[i].tolist(), "ref_idx": int(self.idx[i]),
            "p_ref": ref_pos.tolist(), "psi_ref": float(m.path.psi[self.idx[i]]),
            "chi_ref": float(m.path.chi[self.idx[i]]),
            "delta_ref_cmd": m.path.delta_cmd[self.idx[i]].tolist(),
            "obs": obs.tolist(), "lambda": self.lam[i].tolist(), "action": action.tolist(),
            "delta_cmd": cmd.tolist(),
            "reward": {"tracking": float(info["tracking"][i]), "barrier": float(info["barrier"][i]),
                       "rate": float(info["rate"][i]), "banded": float(info["banded"][i]),
                       "total": float(total)},
            "pos_error": float(info["pos_error"][i]), "cause": cause, "seed": m.seed,
        }

    @property
    def observation(self):
        return self._obs.copy(), self.lam.copy()

    # ------------------------------------------------------------ persistence

    _ARRAYS = ("x", "delta", "cmd_prev", "idx", "k", "lam", "dC", "done", "_obs")

    def state_dict(self) -> dict:
        """Everything needed to continue stepping exactly where we are.

        Paths, scenarios and steady wind are not stored: they are rebuilt by
        replaying each member's reset from its episode seed, so members must
        have been reset through the configured samplers.
        """
        members = []
        for m in self.members:
            members.append({
                "seed": m.seed, "rng": m.rng.bit_generator.state,
                "dryden": None if m.wind is None else m.wind.dryden_state.copy(),
                "pert": None if m.pert is None else m.pert.value.copy(),
                "held_cmd": m.held_cmd.copy(), "errors": list(m.errors), "ret": m.ret,
            })
        return {
            "arrays": {name: getattr(self, name).copy() for name in self._ARRAYS},
            "seeders": [s.bit_generator.state for s in self._seeders],
            "members": members,
        }

    def load_state_dict(self, state: dict):
        if len(state["members"]) != self.num_envs:
            raise ValueError("state was saved from a different number of members")
        for i, saved in enumerate(state["members"]):
            self.reset_member(i, saved["seed"])
            m = self.members[i]
            m.rng.bit_generator.state = saved["rng"]
            if m.wind is not None:
                m.wind.dryden_state = np.asarray(saved["dryden"], dtype=float)
            if m.pert is not None:
                m.pert.value = np.asarray(saved["pert"], dtype=float)
            m.held_cmd = np.asarray(saved["held_cmd"], dtype=float)
            m.errors = list(saved["errors"])
            m.ret = saved["ret"]
        for s, saved in zip(self._seeders, state["seeders"]):
            s.bit_generator.state = saved
        for name in self._ARRAYS:
            setattr(self, name, np.array(state["arrays"][name], dtype=getattr(self, name).dtype))

