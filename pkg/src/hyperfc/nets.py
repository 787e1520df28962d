"""Policy and value networks with hypernetwork adaptation (FiLM or LoRA).

Everything is plain numpy with hand-written reverse-mode gradients. Inputs
are batched along the leading axis; weights are stored ``(n_out, n_in)`` so a
layer computes ``x @ W.T + b``.

Parameters live in a flat, ordered ``dict`` of arrays keyed by name, which
keeps the optimizer, the checkpoint format and the gradient checks simple.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

FILM_SCALE = 0.1
LOG_STD_INIT = float(np.log(0.3))
LOG_2PI = float(np.log(2.0 * np.pi))

_TAG = re.compile(r"^(MLP|FiLM|LoRA\((\d+)\))(\+HC)?$")


class ShapeError(ValueError):
    """Inconsistent array shapes."""


# ---------------------------------------------------------------------------
# architecture description


@dataclass(frozen=True)
class Architecture:
    """Layer widths and adaptation scheme of an actor-critic pair."""

    kind: str = "MLP"            # MLP | FiLM | LoRA
    rank: int = 0
    hyper_critic: bool = False
    obs_dim: int = 34
    lam_dim: int = 6
    act_dim: int = 4
    hidden: tuple = (64, 64)
    hyper_hidden: tuple = (32, 32)

    def __post_init__(self):
        if self.kind not in ("MLP", "FiLM", "LoRA"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.kind == "LoRA" and self.rank < 1:
            raise ValueError("LoRA rank must be positive")
        if self.kind != "LoRA" and self.rank != 0:
            raise ValueError("rank only applies to LoRA")
        if self.kind == "MLP" and self.hyper_critic:
            raise ValueError("MLP has no hypernetwork to condition the critic")

    @classmethod
    def from_tag(cls, tag: str, **widths) -> "Architecture":
        m = _TAG.match(tag.strip())
        if m is None:
            raise ValueError(f"unrecognised architecture tag {tag!r}")
        head, rank, hc = m.groups()
        kind = "LoRA" if head.startswith("LoRA") else head
        return cls(kind=kind, rank=int(rank or 0), hyper_critic=bool(hc), **widths)

    @property
    def tag(self) -> str:
        head = f"LoRA({self.rank})" if self.kind == "LoRA" else self.kind
        return head + ("+HC" if self.hyper_critic else "")

    @property
    def hyper(self) -> bool:
        return self.kind != "MLP"

    @property
    def main_in(self) -> int:
        """Input width of the actor main net."""
        return self.obs_dim if self.hyper else self.obs_dim + self.lam_dim

    @property
    def critic_in(self) -> int:
        return self.obs_dim if self.hyper_critic else self.obs_dim + self.lam_dim

    def adapt_width(self) -> int:
        """Hypernet outputs needed to adapt one network's hidden layers."""
        if self.kind == "FiLM":
            return 2 * sum(self.hidden)
        if self.kind == "LoRA":
            return self.rank * len(self.hidden)
        return 0

    @property
    def hyper_out(self) -> int:
        return self.adapt_width() * (2 if self.hyper_critic else 1)


def _layer_sizes(n_in, hidden, n_out):
    return [n_in, *hidden, n_out]


def param_shapes(arch: Architecture) -> dict:
    """Ordered name -> shape map of every trainable tensor."""
    shapes = {}

    def net(prefix, sizes, lora):
        for i in range(len(sizes) - 1):
            shapes[f"{prefix}.W{i}"] = (sizes[i + 1], sizes[i])
            shapes[f"{prefix}.b{i}"] = (sizes[i + 1],)
        if lora:
            for i in range(len(sizes) - 2):
                shapes[f"{prefix}.U{i}"] = (sizes[i + 1], arch.rank)
                shapes[f"{prefix}.V{i}"] = (sizes[i], arch.rank)

    lora = arch.kind == "LoRA"
    net("actor", _layer_sizes(arch.main_in, arch.hidden, arch.act_dim), lora)
    net("critic", _layer_sizes(arch.critic_in, arch.hidden, 1), lora and arch.hyper_critic)
    if arch.hyper:
        net("hyper", _layer_sizes(arch.lam_dim, arch.hyper_hidden, arch.hyper_out), False)
    shapes["log_std"] = (arch.act_dim,)
    return shapes


@dataclass
class PolicyParams:
    arch: Architecture
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.arch)
        if list(self.tensors) != list(expected):
            raise ShapeError("tensor names do not match the architecture")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.tensors[name].shape}")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name):
        return self.tensors[name]


# ---------------------------------------------------------------------------
# initialization


def orthogonal(shape, gain, rng):
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q[:rows, :cols])


def init_params(arch: Architecture, rng: np.random.Generator) -> PolicyParams:
    """Orthogonal hidden layers (gain sqrt 2), 0.01-gain actor head, unit-gain
    critic head, zero hypernet output layer, Gaussian LoRA factors."""
    tensors = {}
    n_hidden = len(arch.hidden)
    n_hyper = len(arch.hyper_hidden)
    for name, shape in param_shapes(arch).items():
        prefix, leaf = name.split(".") if "." in name else ("", name)
        if leaf == "log_std":
            tensors[name] = np.full(shape, LOG_STD_INIT)
        elif leaf.startswith("b"):
            tensors[name] = np.zeros(shape)
        elif leaf.startswith("W"):
            i = int(leaf[1:])
            last = (n_hyper if prefix == "hyper" else n_hidden) == i
            if prefix == "hyper" and last:
                tensors[name] = np.zeros(shape)
            elif last:
                tensors[name] = orthogonal(shape, 0.01 if prefix == "actor" else 1.0, rng)
            else:
                tensors[name] = orthogonal(shape, np.sqrt(2.0), rng)
        else:
            # U and V both random: with r = 0 at the start the update is still
            # exactly zero, and every factor receives gradient
            tensors[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return PolicyParams(arch, tensors)


# ---------------------------------------------------------------------------
# primitive operations


def film_modulate(preact, scale_raw, shift_raw) -> np.ndarray:
    preact = np.asarray(preact, dtype=float)
    scale_raw = np.asarray(scale_raw, dtype=float)
    shift_raw = np.asarray(shift_raw, dtype=float)
    if preact.shape != scale_raw.shape or preact.shape != shift_raw.shape:
        raise ShapeError("FiLM operands must have equal shapes")
    return (1.0 + FILM_SCALE * scale_raw) * preact + FILM_SCALE * shift_raw


def lora_apply(W, U, V, r, n_r, h) -> np.ndarray:
    """``W h + U (r * (V^T h)) / n_r`` without forming the dense update.

    ``h`` may be a vector or a batch of row vectors; ``r`` then broadcasts
    per row.
    """
    W, U, V = (np.asarray(a, dtype=float) for a in (W, U, V))
    r = np.asarray(r, dtype=float)
    h = np.asarray(h, dtype=float)
    if (W.shape[0] != U.shape[0] or W.shape[1] != V.shape[0] or U.shape[1] != V.shape[1]
            or r.shape[-1] != U.shape[1] or h.shape[-1] != W.shape[1]):
        raise ShapeError("inconsistent LoRA shapes")
    return h @ W.T + ((h @ V) * r) @ U.T / n_r


def dense_forward(weights, biases, x) -> np.ndarray:
    """Plain tanh MLP with linear output."""
    h = np.asarray(x, dtype=float)
    for i, (W, b) in enumerate(zip(weights, biases)):
        h = h @ W.T + b
        if i < len(weights) - 1:
            h = np.tanh(h)
    return h


class DenseNet:
    """tanh MLP with a linear output layer."""

    def __init__(self, weights, biases):
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[0],):
                raise ShapeError(f"layer {i}: bias does not match weight rows")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i}: input width does not chain")

    @classmethod
    def from_params(cls, params: PolicyParams, prefix: str) -> "DenseNet":
        n = sum(1 for k in params.tensors if k.startswith(prefix + ".W"))
        return cls([params[f"{prefix}.W{i}"] for i in range(n)],
                   [params[f"{prefix}.b{i}"] for i in range(n)])

    @property
    def sizes(self):
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def __call__(self, x):
        return dense_forward(self.weights, self.biases, x)

    def forward(self, x):
        acts = [np.asarray(x, dtype=float)]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ W.T + b
            acts.append(np.tanh(z) if i < len(self.weights) - 1 else z)
        return acts[-1], acts

    def backward(self, acts, dy):
        """Gradients of ``sum(dy * y)``: returns (dW list, db list, dx)."""
        dW, db = [None] * len(self.weights), [None] * len(self.weights)
        g = dy
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            dW[i] = g.T @ acts[i]
            db[i] = g.sum(axis=0)
            g = g @ self.weights[i]
        return dW, db, g


# ---------------------------------------------------------------------------
# adapted main network


def _split_adaptation(arch: Architecture, out):
    """Per-hidden-layer adaptation tensors for one network."""
    parts, j = [], 0
    for width in arch.hidden:
        if arch.kind == "FiLM":
            parts.append((out[:, j:j + width], out[:, j + width:j + 2 * width]))
            j += 2 * width
        else:
            parts.append((out[:, j:j + arch.rank],))
            j += arch.rank
    return parts


def _main_forward(t, prefix, arch, x, adapt):
    """Main network forward with optional per-layer adaptation."""
    n_layers = len(arch.hidden) + 1
    cache = {"x": [x], "z0": [], "hv": [], "adapt": adapt}
    h = x
    for i in range(n_layers):
        z = h @ t[f"{prefix}.W{i}"].T + t[f"{prefix}.b{i}"]
        if i == n_layers - 1:
            return z, cache
        if adapt is not None and arch.kind == "LoRA":
            (r,) = adapt[i]
            hv = h @ t[f"{prefix}.V{i}"]
            z = z + (hv * r) @ t[f"{prefix}.U{i}"].T / arch.rank
            cache["hv"].append(hv)
        cache["z0"].append(z)
        if adapt is not None and arch.kind == "FiLM":
            s, b = adapt[i]
            z = (1.0 + FILM_SCALE * s) * z + FILM_SCALE * b
        h = np.tanh(z)
        cache["x"].append(h)
    raise AssertionError("unreachable")


def _main_backward(t, prefix, arch, cache, dy, grads):
    """Accumulates parameter gradients; returns per-layer adaptation grads."""
    n_layers = len(arch.hidden) + 1
    adapt = cache["adapt"]
    d_adapt = [None] * len(arch.hidden)
    g = dy
    for i in reversed(range(n_layers)):
        h = cache["x"][i]
        if i < n_layers - 1:
            a = cache["x"][i + 1]
            g = g * (1.0 - a * a)
            if adapt is not None and arch.kind == "FiLM":
                s, _ = adapt[i]
                d_adapt[i] = (FILM_SCALE * g * cache["z0"][i], FILM_SCALE * g)
                g = g * (1.0 + FILM_SCALE * s)
        W = t[f"{prefix}.W{i}"]
        grads[f"{prefix}.W{i}"] += g.T @ h
        grads[f"{prefix}.b{i}"] += g.sum(axis=0)
        dh = g @ W
        if i < n_layers - 1 and adapt is not None and arch.kind == "LoRA":
            (r,) = adapt[i]
            U, V = t[f"{prefix}.U{i}"], t[f"{prefix}.V{i}"]
            hv = cache["hv"][i]
            q = g @ U / arch.rank
            grads[f"{prefix}.U{i}"] += g.T @ (hv * r) / arch.rank
            d_adapt[i] = (q * hv,)
            dhv = q * r
            grads[f"{prefix}.V{i}"] += h.T @ dhv
            dh = dh + dhv @ V.T
        g = dh
    return d_adapt


def _hyper_layers(arch):
    return len(arch.hyper_hidden) + 1


def hypernet_forward(params: PolicyParams, lam):
    """Adaptation tensors for the actor (and critic with +HC).

    Returns ``(actor_parts, critic_parts)``, each a list with one tuple per
    hidden layer: ``(scale_raw, shift_raw)`` for FiLM or ``(r,)`` for LoRA.
    ``critic_parts`` is ``None`` without a hyper-conditioned critic.
    """
    out, _ = _hyper_forward(params, np.atleast_2d(lam))
    return _hyper_split(params.arch, out)


def _hyper_forward(params, lam):
    t = params.tensors
    acts = [lam]
    n = _hyper_layers(params.arch)
    for i in range(n):
        z = acts[-1] @ t[f"hyper.W{i}"].T + t[f"hyper.b{i}"]
        acts.append(np.tanh(z) if i < n - 1 else z)
    return acts[-1], acts


def _hyper_split(arch, out):
    w = arch.adapt_width()
    actor = _split_adaptation(arch, out[:, :w])
    critic = _split_adaptation(arch, out[:, w:]) if arch.hyper_critic else None
    return actor, critic


def _check_inputs(arch, obs, lam):
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    if obs.shape[-1] != arch.obs_dim or lam.shape[-1] != arch.lam_dim:
        raise ShapeError(f"expected obs width {arch.obs_dim} and lambda width {arch.lam_dim}")
    if obs.shape[0] != lam.shape[0]:
        raise ShapeError("obs and lambda batch sizes differ")
    return obs, lam


def forward_with_cache(params: PolicyParams, obs, lam):
    """Batched forward returning ``(mean (B, act), value (B,), cache)``."""
    arch, t = params.arch, params.tensors
    obs, lam = _check_inputs(arch, obs, lam)
    joint = np.concatenate([obs, lam], axis=1)
    cache = {"hyper": None}
    actor_adapt = critic_adapt = None
    if arch.hyper:
        out, hacts = _hyper_forward(params, lam)
        actor_adapt, critic_adapt = _hyper_split(arch, out)
        cache["hyper"] = hacts
    mean, cache["actor"] = _main_forward(t, "actor", arch, obs if arch.hyper else joint,
                                         actor_adapt)
    value, cache["critic"] = _main_forward(t, "critic", arch,
                                           obs if arch.hyper_critic else joint, critic_adapt)
    return mean, value[:, 0], cache


def policy_forward(params: PolicyParams, obs, lam):
    """Action mean and state value; single inputs give unbatched outputs."""
    single = np.ndim(obs) == 1
    mean, value, _ = forward_with_cache(params, obs, lam)
    return (mean[0], float(value[0])) if single else (mean, value)


def policy_backward(params: PolicyParams, cache, d_mean, d_value) -> dict:
    """Gradients of ``sum(d_mean * mean) + sum(d_value * value)`` for every
    tensor (the ``log_std`` entry is zero; its gradient comes from the loss
    directly)."""
    arch, t = params.arch, params.tensors
    grads = {k: np.zeros_like(v) for k, v in t.items()}
    d_actor = _main_backward(t, "actor", arch, cache["actor"], d_mean, grads)
    d_critic = _main_backward(t, "critic", arch, cache["critic"],
                              np.asarray(d_value, dtype=float)[:, None], grads)
    if arch.hyper:
        parts = [p for layer in d_actor for p in layer]
        if arch.hyper_critic:
            parts += [p for layer in d_critic for p in layer]
        g = np.concatenate(parts, axis=1)
        acts = cache["hyper"]
        n = _hyper_layers(arch)
        for i in reversed(range(n)):
            if i < n - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[f"hyper.W{i}"] += g.T @ acts[i]
            grads[f"hyper.b{i}"] += g.sum(axis=0)
            g = g @ t[f"hyper.W{i}"]
    return grads


def unadapted_forward(params: PolicyParams, obs):
    """Actor main net with every adaptation removed."""
    return DenseNet.from_params(params, "actor")(obs)


# ---------------------------------------------------------------------------
# Gaussian policy head


def gaussian_log_prob(action, mean, log_std) -> np.ndarray:
    z = (np.asarray(action) - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std) + 0.5 * len(log_std) * (1.0 + LOG_2PI))


def sample_action(mean, log_std, rng: np.random.Generator, deterministic: bool = False):
    """Diagonal Gaussian sample and its log-probability."""
    mean = np.asarray(mean, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    if deterministic:
        action = mean.copy()
    else:
        action = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return action, gaussian_log_prob(action, mean, log_std)


# ---------------------------------------------------------------------------
# analysis


def param_count(params) -> int:
    arch = params.arch if isinstance(params, PolicyParams) else params
    return int(sum(np.prod(s) for s in param_shapes(arch).values()))


def flop_count(params) -> int:
    """FLOPs of one action: 2 x multiply-accumulates over the actor main net,
    the actor part of the hypernet and the factored LoRA products."""
    arch = params.arch if isinstance(params, PolicyParams) else params
    macs = 0
    sizes = _layer_sizes(arch.main_in, arch.hidden, arch.act_dim)
    macs += sum(a * b for a, b in zip(sizes[:-1], sizes[1:]))
    if arch.hyper:
        hs = _layer_sizes(arch.lam_dim, arch.hyper_hidden, arch.adapt_width())
        macs += sum(a * b for a, b in zip(hs[:-1], hs[1:]))
    if arch.kind == "LoRA":
        macs += sum((sizes[i] + sizes[i + 1]) * arch.rank for i in range(len(arch.hidden)))
    return 2 * macs


def spectral_norm(W, iters: int = 50, tol: float = 1e-13, max_iters: int = 100_000,
                  seed: int = 0) -> float:
    """Largest singular value by power iteration on ``W^T W``.

    Runs at least ``iters`` iterations from a fixed-seed start vector, then
    continues until the estimate changes by less than ``tol`` (relative).
    """
    if iters < 50:
        raise ValueError("use at least 50 power iterations")
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if not np.any(W):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for k in range(max_iters):
        u = W @ v
        w = W.T @ u
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            # start vector in the null space; restart from a fresh direction
            v = np.random.default_rng(seed + k + 1).standard_normal(W.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = w / norm_w
        new = float(np.linalg.norm(W @ v))
        if k + 1 >= iters and abs(new - sigma) <= tol * new:
            return new
        sigma = new
    return sigma


def lipschitz_bound(net) -> float:
    """Product of layer spectral norms (tanh is 1-Lipschitz)."""
    weights = net.weights if isinstance(net, DenseNet) else list(net)
    bound = 1.0
    for W in weights:
        bound *= spectral_norm(W)
    return bound


def hypernet(params: PolicyParams) -> DenseNet:
    if not params.arch.hyper:
        raise ValueError("architecture has no hypernetwork")
    return DenseNet.from_params(params, "hyper")


def with_widths(tag: str, **widths) -> Architecture:
    """Architecture for ``tag`` with overridden layer widths (for testing)."""
    return replace(Architecture.from_tag(tag), **widths)
