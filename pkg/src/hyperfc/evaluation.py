"""Evaluation protocols (static stuck failures, flutter), path-error metrics
and report writers.

Every episode is a pure function of (parameters, episode seed, scenario), so
reports depend only on the checkpoint, the protocol seed and the config,
whatever order the batched runner happens to finish episodes in.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import EnvConfig, FlightEnv, ProtocolError
from .nets import (DenseNet, PolicyParams, flop_count, forward_with_cache, hypernet,
                   lipschitz_bound, param_count, sample_action, spectral_norm)
from .scenarios import (ACTUATOR_NAMES, ACTUATORS, LAMBDA_EVAL, ScenarioSpec,
                        sample_flutter_scenario, sample_static_scenario)

STATIC = "static"
FLUTTER = "flutter"
PROTOCOLS = (STATIC, FLUTTER)
LOG_FORMAT = "hyperfc.episode_log"
LOG_VERSION = 1


def episode_metrics(errors) -> tuple[float, float]:
    """Mean and maximum position error of one episode."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ProtocolError("episode log has no steps")
    return float(e.mean()), float(e.max())


# ---------------------------------------------------------------------------
# batched episode runner


def run_episodes(params: PolicyParams, jobs, env_cfg: EnvConfig | None = None, airframe=None,
                 batch: int = 64, deterministic: bool = True, action_seed: int = 0,
                 record: bool = False):
    """Run ``jobs`` (a list of ``(episode_seed, ScenarioSpec)``) to completion.

    Returns one result dict per job, in job order. With ``record`` each
    result also carries the per-step log.
    """
    env_cfg = env_cfg or EnvConfig()
    jobs = list(jobs)
    n = min(batch, len(jobs))
    results = [None] * len(jobs)
    if n == 0:
        return results
    env = FlightEnv(env_cfg, airframe, num_envs=n, auto_reset=False, record=record)
    running = [-1] * n   # job index per member, -1 for idle
    queue = iter(range(len(jobs)))
    rngs = {}

    def start(i):
        j = next(queue, None)
        running[i] = -1 if j is None else j
        seed, scenario = jobs[j if j is not None else 0]
        env.reset_member(i, int(seed), scenario)
        if j is not None and not deterministic:
            rngs[j] = np.random.default_rng([action_seed, int(seed)])

    for i in range(n):
        start(i)
    log_count = 0
    while any(j >= 0 for j in running):
        obs, lam = env.observation
        mean, _, _ = forward_with_cache(params, obs, lam)
        if not deterministic:
            for i, j in enumerate(running):
                if j >= 0:
                    mean[i], _ = sample_action(mean[i], params["log_std"], rngs[j])
        _, _, _, done, info = env.step(mean)
        ended = {e["env"]: e for e in info["episodes"]}
        for i in np.flatnonzero(done):
            j = running[i]
            if j >= 0:
                res = dict(ended[i])
                res["job"] = j
                if record:
                    res["log"] = env.finished_logs[log_count]
                results[j] = res
            if record:
                log_count += 1
            start(i)
    return results


# ---------------------------------------------------------------------------
# protocols and reports


def sample_jobs(protocol: str, n_episodes: int, seed: int, horizon: int = 750,
                dt: float = 0.04, levels=LAMBDA_EVAL):
    """Episode seeds and failure scenarios for a protocol."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    rng = np.random.default_rng(seed)
    jobs = []
    for _ in range(n_episodes):
        if protocol == STATIC:
            scenario = sample_static_scenario(rng, horizon, levels)
        else:
            scenario = sample_flutter_scenario(rng, horizon, dt, levels)
        jobs.append((int(rng.integers(2**63 - 1)), scenario))
    return jobs


@dataclass
class EvalReport:
    protocol: str
    policy: str
    episodes: list                   # per-episode result dicts, job order
    deterministic: bool = True
    rows: list = field(default_factory=list)
    curve: list = field(default_factory=list)

    def __post_init__(self):
        if not self.rows:
            self.rows = aggregate_rows(self.episodes, self.policy)
        if not self.curve:
            self.curve = magnitude_curve(self.episodes, self.policy)


def aggregate_rows(episodes, policy: str) -> list[dict]:
    rows = []
    groups = [(ACTUATOR_NAMES[name], [e for e in episodes if e["scenario"]["actuator"] == a])
              for a, name in enumerate(ACTUATORS)]
    groups.append(("All", list(episodes)))
    for name, eps in groups:
        if not eps:
            continue
        mpe = np.array([e["mpe"] for e in eps])
        maxpe = np.array([e["maxpe"] for e in eps])
        rows.append({"policy": policy, "actuator": name, "episodes": len(eps),
                     "mpe_mean": float(mpe.mean()), "maxpe_mean": float(maxpe.mean()),
                     "wc": float(maxpe.max()), "maxpe_sd": float(maxpe.std())})
    return rows


def magnitude_curve(episodes, policy: str) -> list[dict]:
    """Mean MaxPE per (actuator, level): one point per level present."""
    out = []
    for a, name in enumerate(ACTUATORS):
        eps = [e for e in episodes if e["scenario"]["actuator"] == a]
        for level in sorted({e["scenario"]["level"] for e in eps}):
            sel = [e["maxpe"] for e in eps if e["scenario"]["level"] == level]
            out.append({"policy": policy, "actuator": ACTUATOR_NAMES[name], "level": level,
                        "episodes": len(sel), "maxpe_mean": float(np.mean(sel))})
    return out


def evaluate(params: PolicyParams, protocol: str, n_episodes: int = 1000, seed: int = 0,
             env_cfg: EnvConfig | None = None, airframe=None, batch: int = 64,
             deterministic: bool = True, policy: str | None = None) -> EvalReport:
    env_cfg = env_cfg or EnvConfig()
    jobs = sample_jobs(protocol, n_episodes, seed, env_cfg.horizon, env_cfg.dt)
    eps = run_episodes(params, jobs, env_cfg, airframe, batch, deterministic, action_seed=seed)
    return EvalReport(protocol, policy or params.arch.tag, eps, deterministic)


def eval_static(params, n_episodes=1000, seed=0, **kw) -> EvalReport:
    return evaluate(params, STATIC, n_episodes, seed, **kw)


def eval_flutter(params, n_episodes=1000, seed=0, **kw) -> EvalReport:
    return evaluate(params, FLUTTER, n_episodes, seed, **kw)


TABLE_FIELDS = ("policy", "actuator", "episodes", "mpe_mean", "maxpe_mean", "wc", "maxpe_sd")
CURVE_FIELDS = ("policy", "actuator", "level", "episodes", "maxpe_mean")
EPISODE_FIELDS = ("job", "seed", "actuator", "kind", "level", "onset", "duration", "mpe",
                  "maxpe", "return", "length", "cause")


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def write_report(report: EvalReport, out_dir) -> dict:
    """Table, per-magnitude curve and per-episode CSVs; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{report.protocol}"
    paths = {"table": out / f"{stem}_table.csv", "curve": out / f"{stem}_curve.csv",
             "episodes": out / f"{stem}_episodes.csv"}
    _write_csv(paths["table"], TABLE_FIELDS, report.rows)
    _write_csv(paths["curve"], CURVE_FIELDS, report.curve)
    flat = []
    for e in report.episodes:
        sc = e["scenario"]
        flat.append({"job": e["job"], "seed": e["seed"], "actuator": ACTUATORS[sc["actuator"]],
                     "kind": sc["kind"], "level": sc["level"], "onset": sc["onset"],
                     "duration": sc["duration"], "mpe": e["mpe"], "maxpe": e["maxpe"],
                     "return": e["return"], "length": e["length"], "cause": e["cause"]})
    _write_csv(paths["episodes"], EPISODE_FIELDS, flat)
    return paths


def replay_episode(params: PolicyParams, seed: int, scenario: ScenarioSpec,
                   env_cfg: EnvConfig | None = None, airframe=None):
    """Step-by-step log of one deterministic episode."""
    (res,) = run_episodes(params, [(seed, scenario)], env_cfg, airframe, batch=1, record=True)
    return res


def scenario_from_dict(d: dict) -> ScenarioSpec:
    d = dict(d)
    d["schedule"] = tuple(tuple(h) for h in d.get("schedule", ()))
    return ScenarioSpec(**d)


def write_episode_log(path, result: dict, meta: dict | None = None):
    with open(path, "w") as fh:
        header = {"format": LOG_FORMAT, "version": LOG_VERSION, "seed": result["seed"],
                  "scenario": result["scenario"], **(meta or {})}
        fh.write(json.dumps(header) + "\n")
        for rec in result["log"]:
            fh.write(json.dumps(rec) + "\n")


def read_episode_log(path):
    """Returns (header, step records); raises ``ValueError`` if malformed."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty episode log")
    try:
        header = json.loads(lines[0])
        records = [json.loads(ln) for ln in lines[1:] if ln.strip()]
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: malformed episode log ({exc})") from None
    if header.get("format") != LOG_FORMAT:
        raise ValueError(f"{path}: not an episode log")
    if header.get("version") != LOG_VERSION:
        raise ValueError(f"{path}: unsupported episode log version {header.get('version')}")
    required = ("t", "theta", "pos_error", "delta_cmd", "lambda")
    for k, rec in enumerate(records):
        missing = [key for key in required if key not in rec]
        if missing:
            raise ValueError(f"{path}: record {k} lacks {missing}")
    return header, records


def history_tables(records) -> dict:
    """Attitude, position-error, command and lambda histories, one row per step."""
    attitude, position, commands, lam = [], [], [], []
    for r in records:
        t = r["t"]
        phi, theta, psi = r["theta"]
        attitude.append({"t": t, "phi": phi, "theta": theta, "psi": psi,
                         "psi_ref": r.get("psi_ref"), "chi_ref": r.get("chi_ref")})
        dp = np.subtract(r["p"], r["p_ref"]) if "p_ref" in r else (None,) * 3
        position.append({"t": t, "pos_error": r["pos_error"], "dx": dp[0], "dy": dp[1],
                         "dz": dp[2]})
        cmd = r["delta_cmd"]
        row = {"t": t, "cmd_E": cmd[0], "cmd_A": cmd[1], "cmd_R": cmd[2], "cmd_T": cmd[3]}
        if "delta" in r:
            row.update(zip(("delta_E", "delta_Al", "delta_Ar", "delta_R", "delta_T"), r["delta"]))
        commands.append(row)
        lam.append({"t": t, **dict(zip(("Ar_fail", "Ar_val", "Al_fail", "Al_val",
                                        "R_fail", "R_val"), r["lambda"]))})
    return {"attitude": attitude, "position_error": position, "commands": commands,
            "lambda": lam}


def write_history(records, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, rows in history_tables(records).items():
        paths[name] = out / f"{name}.csv"
        _write_csv(paths[name], list(rows[0]) if rows else ["t"], rows)
    return paths


# ---------------------------------------------------------------------------
# network analysis


def empirical_lipschitz(net: DenseNet, n_pairs: int = 10_000, rng=None, scale: float = 1.0):
    """Largest sampled difference quotient ``|f(a) - f(b)| / |a - b|``."""
    rng = rng or np.random.default_rng(0)
    d = net.sizes[0]
    a = rng.uniform(-scale, scale, (n_pairs, d))
    # half the pairs are close, which probes the local slope
    b = a + rng.standard_normal((n_pairs, d)) * np.where(np.arange(n_pairs) % 2, 1e-3, scale)[:, None]
    num = np.linalg.norm(net(a) - net(b), axis=1)
    den = np.linalg.norm(a - b, axis=1)
    return float(np.max(num / den))


def lipschitz_report(params: PolicyParams, include_main: bool = True) -> list[dict]:
    """Spectral-norm product bound per network, with its per-layer norms."""
    rows = []
    nets = []
    if params.arch.hyper:
        nets.append(("hypernet", hypernet(params)))
    if include_main:
        nets.append(("actor", DenseNet.from_params(params, "actor")))
        nets.append(("critic", DenseNet.from_params(params, "critic")))
    for name, net in nets:
        norms = [spectral_norm(W) for W in net.weights]
        rows.append({"architecture": params.arch.tag, "network": name,
                     "bound": float(np.prod(norms)),
                     "layer_norms": " ".join(repr(float(s)) for s in norms)})
    return rows


def analysis_table(params: PolicyParams) -> dict:
    """Parameter count, FLOPs per action and hypernet bound (Table III layout)."""
    bound = lipschitz_bound(hypernet(params)) if params.arch.hyper else float("nan")
    return {"architecture": params.arch.tag, "params": param_count(params),
            "flops": flop_count(params), "hypernet_lipschitz": bound}


def report_dict(report: EvalReport) -> dict:
    return {"protocol": report.protocol, "policy": report.policy,
            "deterministic": report.deterministic, "rows": report.rows, "curve": report.curve}
