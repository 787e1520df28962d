"""Proximal policy optimization for the joint main-net/hypernet policy.

Rollouts come from a vectorized :class:`~hyperfc.env.FlightEnv`; advantages
use GAE with value bootstrapping at truncations (horizon, path end); the
update is the clipped surrogate with Adam and global grad-norm clipping.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .env import N_ACTION, N_LAMBDA, N_OBS_STATE, EnvConfig, FlightEnv
from .nets import (Architecture, PolicyParams, forward_with_cache, gaussian_entropy,
                   gaussian_log_prob, init_params, policy_backward, sample_action)


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; the update was aborted."""


@dataclass
class PPOConfig:
    lr: float = 3e-4
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 10
    minibatch: int = 64
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    max_grad_norm: float = 0.5
    num_envs: int = 16
    num_steps: int = 512
    iterations: int = 100
    seed: int = 0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip ratio must lie in (0, 1)")
        if not (0.0 < self.gamma <= 1.0 and 0.0 < self.gae_lambda <= 1.0):
            raise ValueError("gamma and GAE lambda must lie in (0, 1]")
        if min(self.epochs, self.minibatch, self.num_envs, self.num_steps) < 1:
            raise ValueError("epochs, minibatch, num_envs and num_steps must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        self.adam_betas = tuple(self.adam_betas)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutBuffer:
    """Time-major arrays of shape ``(num_steps, num_envs, ...)``."""

    obs: np.ndarray
    lam: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    truncated: np.ndarray
    bootstrap: np.ndarray            # value of the final state of truncated episodes
    causes: list
    last_values: np.ndarray = None   # value of the state after the last step
    episodes: list = field(default_factory=list)
    advantages: np.ndarray = None
    returns: np.ndarray = None

    @classmethod
    def empty(cls, num_steps, num_envs):
        z = lambda *s: np.zeros((num_steps, num_envs, *s))  # noqa: E731
        return cls(obs=z(N_OBS_STATE), lam=z(N_LAMBDA), actions=z(N_ACTION), logp=z(),
                   rewards=z(), values=z(), dones=np.zeros((num_steps, num_envs), bool),
                   truncated=np.zeros((num_steps, num_envs), bool), bootstrap=z(),
                   causes=[None] * num_steps)

    def __len__(self):
        return self.rewards.size


def collect_rollouts(env: FlightEnv, params: PolicyParams, num_steps: int,
                     rng: np.random.Generator) -> RolloutBuffer:
    """Steps ``env`` (already reset, auto-resetting) under the stochastic policy."""
    buf = RolloutBuffer.empty(num_steps, env.num_envs)
    log_std = params["log_std"]
    obs, lam = env.observation
    for t in range(num_steps):
        mean, value, _ = forward_with_cache(params, obs, lam)
        action, logp = sample_action(mean, log_std, rng)
        buf.obs[t], buf.lam[t], buf.actions[t] = obs, lam, action
        buf.logp[t], buf.values[t] = logp, value
        try:
            obs, lam, reward, done, info = env.step(action)
        except Exception as exc:
            bad = [i for i in range(env.num_envs) if not np.all(np.isfinite(env.x[i]))]
            raise type(exc)(f"{exc} (env indices with non-finite state: {bad})") from exc
        buf.rewards[t], buf.dones[t], buf.truncated[t] = reward, done, info["truncated"]
        buf.causes[t] = info["cause"]
        if np.any(info["truncated"]):
            sel = np.flatnonzero(info["truncated"])
            _, v_term, _ = forward_with_cache(params, info["terminal_obs"][sel],
                                              info["terminal_lam"][sel])
            buf.bootstrap[t, sel] = v_term
        buf.episodes.extend(info["episodes"])
    _, buf.last_values, _ = forward_with_cache(params, obs, lam)
    return buf


def compute_gae(rewards, values, dones, last_value, gamma: float, lam: float,
                bootstrap=None):
    """Generalized advantage estimates and returns.

    ``delta_t = r_t + gamma * next_t - V_t`` where ``next_t`` is ``V_{t+1}``
    inside an episode and ``bootstrap_t`` (zero by default) where an episode
    ended. Arrays are time-major; extra trailing axes are environments.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    notdone = 1.0 - np.asarray(dones, dtype=float)
    boot = np.zeros_like(rewards) if bootstrap is None else np.asarray(bootstrap, dtype=float)
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_value, dtype=float)
    running = np.zeros_like(next_value)
    for t in reversed(range(len(rewards))):
        target = notdone[t] * next_value + (1.0 - notdone[t]) * boot[t]
        delta = rewards[t] + gamma * target - values[t]
        running = delta + gamma * lam * notdone[t] * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    centred = adv - adv.mean()
    sd = centred.std()
    return centred / sd if sd > 0.0 else centred


# ---------------------------------------------------------------------------
# optimizer and loss


class Adam:
    def __init__(self, params: PolicyParams, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: PolicyParams, grads: dict):
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in params.tensors.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


def ppo_loss_and_grad(params: PolicyParams, obs, lam, actions, old_logp, adv, returns,
                      cfg: PPOConfig):
    """Clipped-surrogate loss, its gradient and minibatch statistics."""
    n = len(adv)
    log_std = params["log_std"]
    mean, value, cache = forward_with_cache(params, obs, lam)
    logp = gaussian_log_prob(actions, mean, log_std)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    policy_loss = -surr.mean()
    value_loss = np.mean((value - returns) ** 2)
    entropy = gaussian_entropy(log_std)
    loss = policy_loss + cfg.vf_coef * value_loss - cfg.ent_coef * entropy

    # gradient of the surrogate passes only where the unclipped branch is taken
    active = ratio * adv <= clipped * adv
    d_logp = -np.where(active, adv * ratio, 0.0) / n
    inv_var = np.exp(-2.0 * log_std)
    diff = actions - mean
    d_mean = d_logp[:, None] * diff * inv_var
    d_value = cfg.vf_coef * 2.0 * (value - returns) / n
    grads = policy_backward(params, cache, d_mean, d_value)
    grads["log_std"] = (d_logp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0)
    grads["log_std"] -= cfg.ent_coef

    log_ratio = logp - old_logp
    stats = {
        "loss": float(loss), "policy_loss": float(policy_loss),
        "value_loss": float(value_loss), "entropy": entropy,
        "approx_kl": float(np.mean(ratio - 1.0 - log_ratio)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
    }
    return loss, grads, stats


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def ppo_update(params: PolicyParams, buf: RolloutBuffer, cfg: PPOConfig, opt: Adam,
               rng: np.random.Generator) -> dict:
    """In-place update of ``params``; returns statistics averaged over
    minibatches."""
    adv, ret = compute_gae(buf.rewards, buf.values, buf.dones, buf.last_values,
                           cfg.gamma, cfg.gae_lambda, buf.bootstrap)
    buf.advantages, buf.returns = adv, ret
    n = len(buf)
    flat = {
        "obs": buf.obs.reshape(n, -1), "lam": buf.lam.reshape(n, -1),
        "actions": buf.actions.reshape(n, -1), "logp": buf.logp.reshape(n),
        "adv": normalize_advantages(adv.reshape(n)), "ret": ret.reshape(n),
    }
    sums, count = {}, 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            mb = order[start:start + cfg.minibatch]
            loss, grads, stats = ppo_loss_and_grad(
                params, flat["obs"][mb], flat["lam"][mb], flat["actions"][mb],
                flat["logp"][mb], flat["adv"][mb], flat["ret"][mb], cfg)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(
                    f"non-finite loss or gradient (loss={loss}, stats={stats}); update aborted")
            stats["grad_norm"] = clip_grad_norm(grads, cfg.max_grad_norm)
            opt.step(params, grads)
            for k, v in stats.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in sums.items()}


# ---------------------------------------------------------------------------
# training loop


LOG_FIELDS = ("iteration", "env_steps", "episodes", "mean_episode_return",
              "mean_episode_length", "mean_step_reward", "loss", "policy_loss",
              "value_loss", "entropy", "approx_kl", "clip_fraction", "grad_norm",
              "eval_return")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def evaluate_deterministic(params: PolicyParams, env_cfg: EnvConfig, airframe, seeds) -> float:
    """Mean return of deterministic-policy episodes on fixed seeds."""
    env = FlightEnv(env_cfg, airframe, num_envs=len(seeds), auto_reset=False)
    obs, lam = env.reset(seeds=list(seeds))
    returns = np.zeros(len(seeds))
    live = np.ones(len(seeds), dtype=bool)
    while np.any(live):
        mean, _ = policy_forward_batch(params, obs, lam)
        obs, lam, reward, done, _ = env.step(mean)
        returns += np.where(live, reward, 0.0)
        live &= ~done
        # finished members are restarted but ignored; stepping them keeps the
        # batch rectangular
        for i in np.flatnonzero(done):
            env.reset_member(i, int(seeds[i]))
        obs, lam = env.observation
    return float(returns.mean())


def policy_forward_batch(params, obs, lam):
    mean, value, _ = forward_with_cache(params, obs, lam)
    return mean, value


@dataclass
class TrainSetup:
    arch: Architecture
    ppo: PPOConfig
    env: EnvConfig
    airframe: object = None
    out_dir: Path = Path("runs/default")
    checkpoint_every: int = 10
    eval_every: int = 0
    eval_episodes: int = 4
    resolved_config: dict = field(default_factory=dict)


class Trainer:
    """Collect, update, log and checkpoint; resumable from the latest
    checkpoint with bit-identical continuation."""

    def __init__(self, setup: TrainSetup):
        self.s = setup
        cfg = setup.ppo
        root = np.random.SeedSequence(cfg.seed)
        init_seed, env_seed, policy_seed, update_seed, eval_seed = root.spawn(5)
        self.params = init_params(setup.arch, np.random.default_rng(init_seed))
        self.opt = Adam(self.params, cfg.lr, cfg.adam_betas, cfg.adam_eps)
        self.env = FlightEnv(setup.env, setup.airframe, num_envs=cfg.num_envs,
                             seed=int(env_seed.generate_state(1)[0]))
        self.policy_rng = np.random.default_rng(policy_seed)
        self.update_rng = np.random.default_rng(update_seed)
        self.eval_seeds = [int(s) for s in
                           np.random.default_rng(eval_seed).integers(2**31, size=setup.eval_episodes)]
        self.iteration = 0
        self.env.reset()
        self.out = Path(setup.out_dir)

    # paths
    @property
    def log_path(self):
        return self.out / "train_log.csv"

    @property
    def timing_path(self):
        return self.out / "timing.csv"

    @property
    def episodes_path(self):
        return self.out / "episodes.jsonl"

    @property
    def latest_path(self):
        return self.out / "checkpoint_latest.json"

    def state_extra(self) -> dict:
        return {
            "iteration": self.iteration, "optimizer": self.opt.state_dict(),
            "policy_rng": self.policy_rng.bit_generator.state,
            "update_rng": self.update_rng.bit_generator.state,
            "env": self.env.state_dict(), "config": self.s.resolved_config,
        }

    def save(self, path=None):
        save_checkpoint(path or self.latest_path, self.params, self.state_extra())

    def resume(self, path=None):
        params, extra = load_checkpoint(path or self.latest_path)
        if params.arch != self.params.arch:
            raise ValueError(f"checkpoint architecture {params.arch.tag} does not match "
                             f"configured {self.params.arch.tag}")
        self.params = params
        self.opt.load_state_dict(extra["optimizer"])
        self.policy_rng.bit_generator.state = extra["policy_rng"]
        self.update_rng.bit_generator.state = extra["update_rng"]
        self.env.load_state_dict(extra["env"])
        self.iteration = int(extra["iteration"])
        self._truncate_logs()

    def _truncate_logs(self):
        """Drop log rows written after the checkpoint being resumed."""
        for path, key in ((self.log_path, "csv"), (self.timing_path, "csv"),
                          (self.episodes_path, "jsonl")):
            if not path.exists():
                continue
            lines = path.read_text().splitlines(keepends=True)
            if key == "csv":
                kept = lines[:1] + [ln for ln in lines[1:]
                                    if int(ln.split(",", 1)[0]) <= self.iteration]
            else:
                kept = [ln for ln in lines if json.loads(ln)["iteration"] <= self.iteration]
            path.write_text("".join(kept))

    def _append(self, path, header, row):
        new = not path.exists()
        with path.open("a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(header)
            w.writerow(row)

    def run_iteration(self) -> dict:
        cfg = self.s.ppo
        t0 = time.perf_counter()
        buf = collect_rollouts(self.env, self.params, cfg.num_steps, self.policy_rng)
        t1 = time.perf_counter()
        stats = ppo_update(self.params, buf, cfg, self.opt, self.update_rng)
        t2 = time.perf_counter()
        self.iteration += 1
        eps = buf.episodes
        row = {
            "iteration": self.iteration, "env_steps": len(buf), "episodes": len(eps),
            "mean_episode_return": float(np.mean([e["return"] for e in eps])) if eps else float("nan"),
            "mean_episode_length": float(np.mean([e["length"] for e in eps])) if eps else float("nan"),
            "mean_step_reward": float(buf.rewards.mean()), **stats, "eval_return": float("nan"),
        }
        if self.s.eval_every and self.iteration % self.s.eval_every == 0:
            row["eval_return"] = evaluate_deterministic(self.params, self.s.env,
                                                        self.s.airframe, self.eval_seeds)
        self.out.mkdir(parents=True, exist_ok=True)
        self._append(self.log_path, LOG_FIELDS, [_fmt(row[k]) for k in LOG_FIELDS])
        self._append(self.timing_path, ("iteration", "rollout_s", "update_s", "total_s"),
                     [self.iteration, f"{t1 - t0:.4f}", f"{t2 - t1:.4f}",
                      f"{time.perf_counter() - t0:.4f}"])
        with self.episodes_path.open("a") as fh:
            for e in eps:
                fh.write(json.dumps({"iteration": self.iteration, **e}) + "\n")
        if self.s.checkpoint_every and self.iteration % self.s.checkpoint_every == 0:
            self.save(self.out / f"checkpoint_{self.iteration:05d}.json")
        self.save()
        return row

    def train(self, callback=None):
        while self.iteration < self.s.ppo.iterations:
            row = self.run_iteration()
            if callback is not None:
                callback(row)
        return self.params


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("iteration", "env_steps", "episodes") else float(v))
                 for k, v in r.items()} for r in csv.DictReader(fh)]


def config_dict(setup: TrainSetup) -> dict:
    return {"architecture": setup.arch.tag, "ppo": asdict(setup.ppo), "env": setup.env.to_dict()}
