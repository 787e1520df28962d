"""Trim conditions, motion-primitive reference paths and path-progress
tracking."""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import root

from .airframe import AirframeParams
from .dynamics import AircraftState, expand_command, packed_derivative, specific_force

K_REF = (-0.02, -0.012, 0.012, 0.02)
GAMMA_REF = (-0.21, -0.11, 0.0, 0.11, 0.21)
V_NOM = 21.0

# column slices of ReferencePath.table
REF_COLUMNS = {"omega": slice(0, 3), "V": slice(3, 4), "attitude": slice(4, 7),
               "pos": slice(7, 10), "f": slice(10, 13), "chi": slice(13, 14),
               "delta_cmd": slice(14, 18), "kappa": slice(18, 19), "gamma": slice(19, 20)}

PATH_FORMAT = "hyperfc.reference_path"
PATH_VERSION = 1


class TrimError(RuntimeError):
    """The trim solver did not converge or produced an infeasible input."""


@dataclass(frozen=True)
class TrimCondition:
    kappa: float
    gamma: float
    V: float
    v: np.ndarray        # body velocity
    attitude: np.ndarray  # (phi, theta, 0)
    omega: np.ndarray
    delta_cmd: np.ndarray  # elevator, aileron, rudder, throttle
    psi_dot: float
    residual: float
    coefficients: np.ndarray
    specific_force: np.ndarray

    @property
    def bank(self) -> float:
        return float(self.attitude[0])

    @property
    def delta(self) -> np.ndarray:
        return expand_command(self.delta_cmd)

    def state(self, position=(0.0, 0.0, 0.0), psi: float = 0.0) -> AircraftState:
        att = self.attitude.copy()
        att[2] = psi
        return AircraftState(np.asarray(position, float), self.v, att, self.omega, self.delta)


def _trim_unpack(z, kappa, gamma, V):
    u, v, w, phi, theta, de, da, dr, dT100 = z
    psi_dot = kappa * V * np.cos(gamma)
    omega = psi_dot * np.array([-np.sin(theta), np.sin(phi) * np.cos(theta),
                                np.cos(phi) * np.cos(theta)])
    x = np.concatenate([[0.0, 0.0, 0.0], [u, v, w], [phi, theta, 0.0], omega])
    delta_cmd = np.array([de, da, dr, 100.0 * dT100])
    return x, delta_cmd, psi_dot


def _trim_residual(z, kappa, gamma, V, af):
    x, delta_cmd, _ = _trim_unpack(z, kappa, gamma, V)
    xdot, _, _ = packed_derivative(x, expand_command(delta_cmd), np.zeros(3), np.zeros(6), af,
                                   strict=False)
    res = np.empty(9)
    res[0:3] = xdot[3:6]
    res[3:6] = xdot[9:12]
    res[6] = np.linalg.norm(x[3:6]) - V
    res[7] = xdot[2] + V * np.sin(gamma)
    res[8] = xdot[1]  # zero lateral inertial velocity at psi = 0: course equals yaw
    return res


def solve_trim(kappa: float, gamma: float, V: float = V_NOM, af: AirframeParams | None = None,
               tol: float = 1e-6) -> TrimCondition:
    """Steady coordinated turn / climb at airspeed ``V`` in still air.

    ``kappa`` is the inverse horizontal turn radius (positive turns right) and
    ``gamma`` the flight-path angle. The heading rate is ``kappa V cos(gamma)``.
    """
    if af is None:
        af = AirframeParams()
    if not np.isfinite(kappa) or not np.isfinite(gamma) or abs(gamma) >= np.pi / 2:
        raise TrimError(f"invalid trim request kappa={kappa} gamma={gamma}")
    bank0 = np.arctan(V**2 * kappa * np.cos(gamma) / af.g)
    z0 = np.array([V, 0.0, 0.03 * V, bank0, gamma + 0.03, 0.0, 0.0, 0.0, 1.1])
    sol = root(_trim_residual, z0, args=(kappa, gamma, V, af), method="hybr",
               options={"xtol": 1e-14, "maxfev": 4000})
    z = sol.x
    # polish with plain Newton steps on a finite-difference Jacobian
    for _ in range(5):
        r = _trim_residual(z, kappa, gamma, V, af)
        if np.linalg.norm(r) < 1e-12:
            break
        Jac = np.empty((9, 9))
        for j in range(9):
            h = 1e-7 * max(1.0, abs(z[j]))
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            Jac[:, j] = (_trim_residual(zp, kappa, gamma, V, af)
                         - _trim_residual(zm, kappa, gamma, V, af)) / (2 * h)
        z = z - np.linalg.solve(Jac, r)
    residual = float(np.linalg.norm(_trim_residual(z, kappa, gamma, V, af)))
    if not np.isfinite(residual) or residual >= tol:
        raise TrimError(f"trim did not converge (kappa={kappa}, gamma={gamma}, "
                        f"residual={residual:.3e})")
    x, delta_cmd, psi_dot = _trim_unpack(z, kappa, gamma, V)
    if np.any(delta_cmd >= af.cmd_max) or np.any(delta_cmd <= af.cmd_min):
        raise TrimError(f"trim input saturates actuators: {delta_cmd}")
    _, aero, _ = packed_derivative(x, expand_command(delta_cmd), np.zeros(3), np.zeros(6), af)
    return TrimCondition(kappa=float(kappa), gamma=float(gamma), V=float(V), v=x[3:6].copy(),
                         attitude=x[6:9].copy(), omega=x[9:12].copy(), delta_cmd=delta_cmd,
                         psi_dot=float(psi_dot), residual=residual, coefficients=aero.C.copy(),
                         specific_force=specific_force(aero, af))


@functools.lru_cache(maxsize=8)
def trim_table(af: AirframeParams, V: float = V_NOM) -> dict:
    """All trims of the motion-primitive grid, keyed by ``(kappa, gamma)``."""
    table = {}
    for kappa in (0.0,) + K_REF:
        for gamma in GAMMA_REF:
            table[(kappa, gamma)] = solve_trim(kappa, gamma, V, af)
    return table


# ---------------------------------------------------------------------------
# reference paths


@dataclass(frozen=True)
class ReferencePath:
    """Per-step reference arrays sampled at ``dt``.

    ``pos`` (n,3), ``psi``/``chi``/``kappa``/``gamma`` (n,), ``v``/``attitude``/
    ``omega``/``specific_force`` (n,3), ``delta_cmd`` (n,4), ``segment`` (n,).
    """

    dt: float
    pos: np.ndarray
    psi: np.ndarray
    chi: np.ndarray
    kappa: np.ndarray
    gamma: np.ndarray
    v: np.ndarray
    attitude: np.ndarray
    omega: np.ndarray
    delta_cmd: np.ndarray
    specific_force: np.ndarray
    segment: np.ndarray
    end_pose: tuple

    def __len__(self) -> int:
        return self.pos.shape[0]

    @functools.cached_property
    def speed(self) -> np.ndarray:
        return np.linalg.norm(self.v, axis=1)

    @functools.cached_property
    def table(self) -> np.ndarray:
        """Reference columns packed per step, see :data:`REF_COLUMNS`."""
        return np.concatenate([self.omega, self.speed[:, None], self.attitude, self.pos,
                               self.specific_force, self.chi[:, None], self.delta_cmd,
                               self.kappa[:, None], self.gamma[:, None]], axis=1)

    def length(self) -> float:
        """Arc length, including the final step to the end pose."""
        pts = np.vstack([self.pos, np.asarray(self.end_pose[:3])[None]])
        return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))

    def state_at(self, k: int) -> AircraftState:
        return AircraftState(self.pos[k], self.v[k], self.attitude[k], self.omega[k],
                             expand_command(self.delta_cmd[k]))


def _pose_after(trim: TrimCondition, t, start_pose):
    x0, y0, z0, psi0 = start_pose
    t = np.asarray(t, dtype=float)
    Vh = trim.V * np.cos(trim.gamma)
    psi = psi0 + trim.psi_dot * t
    if trim.kappa == 0.0:
        x = x0 + Vh * t * np.cos(psi0)
        y = y0 + Vh * t * np.sin(psi0)
    else:
        R = Vh / trim.psi_dot
        x = x0 + R * (np.sin(psi) - np.sin(psi0))
        y = y0 - R * (np.cos(psi) - np.cos(psi0))
    z = z0 - trim.V * np.sin(trim.gamma) * t
    return x, y, z, psi


def build_segment(trim: TrimCondition, duration: float, start_pose, dt: float = 0.04,
                  segment_id: int = 0) -> ReferencePath:
    """Closed-form trim propagation (line, arc or helix) from ``start_pose``
    = (x, y, z, psi)."""
    n = int(round(duration / dt))
    if n < 1:
        raise ValueError("segment shorter than one step")
    t = np.arange(n) * dt
    x, y, z, psi = _pose_after(trim, t, start_pose)
    end = tuple(float(e) for e in _pose_after(trim, n * dt, start_pose))
    att = np.tile(trim.attitude, (n, 1))
    att[:, 2] = psi
    return ReferencePath(
        dt=dt,
        pos=np.stack([x, y, z], axis=1),
        psi=psi.copy(),
        chi=psi.copy(),
        kappa=np.full(n, trim.kappa),
        gamma=np.full(n, trim.gamma),
        v=np.tile(trim.v, (n, 1)),
        attitude=att,
        omega=np.tile(trim.omega, (n, 1)),
        delta_cmd=np.tile(trim.delta_cmd, (n, 1)),
        specific_force=np.tile(trim.specific_force, (n, 1)),
        segment=np.full(n, segment_id, dtype=int),
        end_pose=end,
    )


def concatenate_segments(segments) -> ReferencePath:
    segments = list(segments)
    if not segments:
        raise ValueError("need at least one segment")
    for prev, nxt in zip(segments, segments[1:]):
        start = (*nxt.pos[0], nxt.psi[0])
        if not np.allclose(start, prev.end_pose, atol=1e-9, rtol=0):
            raise ValueError("segment does not start at the previous end pose")
        if nxt.dt != prev.dt:
            raise ValueError("segments sampled at different dt")
    fields = ("pos", "psi", "chi", "kappa", "gamma", "v", "attitude", "omega",
              "delta_cmd", "specific_force")
    data = {f: np.concatenate([getattr(s, f) for s in segments]) for f in fields}
    seg = np.concatenate([np.full(len(s), i, dtype=int) for i, s in enumerate(segments)])
    return ReferencePath(dt=segments[0].dt, segment=seg, end_pose=segments[-1].end_pose, **data)


def sample_path(rng: np.random.Generator, af: AirframeParams | None = None,
                min_duration: float = 60.0, dt: float = 0.04,
                start_position=(0.0, 0.0, -100.0), segment_range=(5.0, 15.0),
                straight_only: bool = False, level_only: bool = False) -> ReferencePath:
    """Figure-eight style path: straight legs alternating with turns whose
    direction flips each time, each leg on a random flight-path angle."""
    if af is None:
        af = AirframeParams()
    table = trim_table(af)
    psi0 = rng.uniform(-np.pi, np.pi)
    pose = (*map(float, start_position), float(psi0))
    turn_sign = rng.choice([-1.0, 1.0])
    segments = []
    total = 0.0
    straight = True
    while total < min_duration:
        duration = rng.uniform(*segment_range)
        gamma = 0.0 if level_only else float(rng.choice(GAMMA_REF))
        if straight or straight_only:
            kappa = 0.0
        else:
            kappa = turn_sign * float(rng.choice([0.012, 0.02]))
            turn_sign = -turn_sign
        seg = build_segment(table[(kappa, gamma)], duration, pose, dt, len(segments))
        segments.append(seg)
        pose = seg.end_pose
        total += len(seg) * dt
        straight = not straight
    return concatenate_segments(segments)


def advance_reference(path: ReferencePath, p, idx: int, lookahead: int = 1,
                      max_advance: int = 3, search_back: int = 5, search_ahead: int = 10):
    """Move the reference index along the path.

    The aircraft position is projected onto the nearby path samples; the new
    index is the closest sample plus ``lookahead``, never behind ``idx`` and
    at most ``max_advance`` ahead of it. Returns ``(new_idx, complete)``
    where ``complete`` flags that the end of the path was reached.
    """
    n = len(path)
    lo = max(0, idx - search_back)
    hi = min(n, idx + search_ahead + 1)
    d2 = np.sum((path.pos[lo:hi] - np.asarray(p, float)) ** 2, axis=1)
    closest = lo + int(np.argmin(d2))
    new = min(max(closest + lookahead, idx), idx + max_advance)
    if new >= n - 1:
        return n - 1, True
    return new, False


# ---------------------------------------------------------------------------
# JSON-lines persistence


def save_path(path: ReferencePath, file) -> None:
    with open(file, "w") as fh:
        fh.write(json.dumps({"format": PATH_FORMAT, "version": PATH_VERSION, "dt": path.dt,
                             "end_pose": list(path.end_pose)}) + "\n")
        for k in range(len(path)):
            rec = {"k": k, "pos": path.pos[k].tolist(), "psi": float(path.psi[k]),
                   "chi": float(path.chi[k]), "kappa": float(path.kappa[k]),
                   "gamma": float(path.gamma[k]), "v": path.v[k].tolist(),
                   "attitude": path.attitude[k].tolist(), "omega": path.omega[k].tolist(),
                   "delta_cmd": path.delta_cmd[k].tolist(),
                   "specific_force": path.specific_force[k].tolist(),
                   "segment": int(path.segment[k])}
            fh.write(json.dumps(rec) + "\n")


def load_path(file) -> ReferencePath:
    lines = Path(file).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != PATH_FORMAT or header.get("version") != PATH_VERSION:
        raise ValueError("not a reference-path file of a supported version")
    recs = [json.loads(line) for line in lines[1:]]
    col = lambda key: np.array([r[key] for r in recs], dtype=float)
    return ReferencePath(dt=header["dt"], pos=col("pos"), psi=col("psi"), chi=col("chi"),
                         kappa=col("kappa"), gamma=col("gamma"), v=col("v"),
                         attitude=col("attitude"), omega=col("omega"),
                         delta_cmd=col("delta_cmd"), specific_force=col("specific_force"),
                         segment=np.array([r["segment"] for r in recs], dtype=int),
                         end_pose=tuple(header["end_pose"]))

