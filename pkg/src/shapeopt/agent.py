"""Proximal policy optimisation on plain numpy.

Policy and value function are separate tanh MLPs. The policy outputs the
mean of a diagonal Gaussian through a final tanh; the log standard deviation
is a free, state-independent vector. Gradients are derived by hand for this
fixed architecture.

Episodes have a single step, so generalised advantage estimation reduces to
``reward - value`` whatever the discount and trace parameters are; both are
kept in the config and go through the general recursion anyway.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

LOG_STD_BOUNDS = (-5.0, 2.0)
_LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"SHAPEOPT"
CHECKPOINT_VERSION = 1


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    clip: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 50
    epochs: int = 8
    minibatches: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    max_grad_norm: float = 0.5
    hidden: tuple[int, ...] = (512, 512)
    log_std_init: float = -0.5
    optimizer: str = "adam"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if self.entropy_coef < 0.0:
            raise ValueError("entropy coefficient must be >= 0")
        if self.batch_size < 1 or self.epochs < 1 or self.minibatches < 1:
            raise ValueError("batch size, epochs and minibatches must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


# ---------------------------------------------------------------- parameters

@dataclass
class PolicyParams:
    """All trainable arrays, keyed ``pi.W0``, ``pi.b0``, ..., ``log_std``, ``v.W0``, ..."""

    obs_dim: int
    act_dim: int
    hidden: tuple[int, ...]
    arrays: dict = field(repr=False)

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def names(self) -> list[str]:
        out = []
        for head in ("pi", "v"):
            for k in range(self.n_layers):
                out += [f"{head}.W{k}", f"{head}.b{k}"]
            if head == "pi":
                out.append("log_std")
        return out

    def layers(self, head: str) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.arrays[f"{head}.W{k}"], self.arrays[f"{head}.b{k}"])
                for k in range(self.n_layers)]

    @property
    def log_std(self) -> np.ndarray:
        return self.arrays["log_std"]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.obs_dim, self.act_dim, self.hidden,
                            {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in self.names()])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_params(obs_dim: int, act_dim: int, hidden: Sequence[int] = (512, 512),
                rng: Optional[np.random.Generator] = None, log_std_init: float = -0.5,
                output_scale: float = 0.01) -> PolicyParams:
    rng = np.random.default_rng(0) if rng is None else rng
    hidden = tuple(int(h) for h in hidden)
    arrays = {}
    for head, n_out, scale in (("pi", act_dim, output_scale), ("v", 1, 1.0)):
        dims = (obs_dim,) + hidden + (n_out,)
        for k in range(len(dims) - 1):
            gain = math.sqrt(2.0) if k < len(dims) - 2 else scale
            arrays[f"{head}.W{k}"] = _orthogonal(rng, dims[k], dims[k + 1], gain)
            arrays[f"{head}.b{k}"] = np.zeros(dims[k + 1])
        if head == "pi":
            arrays["log_std"] = np.full(act_dim, float(log_std_init))
    return PolicyParams(obs_dim, act_dim, hidden, arrays)


# ---------------------------------------------------------------- MLP

def mlp_forward(layers, x: np.ndarray):
    """Tanh hidden layers, linear output. Returns (output, activations)."""
    acts = [x]
    h = x
    for k, (W, b) in enumerate(layers):
        z = h @ W + b
        h = np.tanh(z) if k < len(layers) - 1 else z
        acts.append(h)
    return h, acts


def mlp_backward(layers, acts, dout: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    grads = [None] * len(layers)
    d = dout
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        h_in = acts[k]
        grads[k] = (h_in.T @ d, d.sum(axis=0))
        if k > 0:
            d = (d @ W.T) * (1.0 - acts[k] ** 2)
    return grads


def _as_batch(obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=float)
    return obs[None, :] if obs.ndim == 1 else obs


def forward_policy(params: PolicyParams, observation) -> tuple[np.ndarray, np.ndarray]:
    obs = _as_batch(observation)
    z, _ = mlp_forward(params.layers("pi"), obs)
    mean = np.tanh(z)
    std = np.exp(params.log_std)
    if np.asarray(observation).ndim == 1:
        mean = mean[0]
    return mean, std


def value(params: PolicyParams, observation) -> np.ndarray:
    out, _ = mlp_forward(params.layers("v"), _as_batch(observation))
    return out[:, 0]


def gaussian_log_prob(x: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=-1)


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std + 0.5 * (_LOG_2PI + 1.0)))


class ActionSample(NamedTuple):
    action: np.ndarray     # clamped to [-1, 1], what the environment sees
    log_prob: float        # Gaussian log-density of ``raw``
    raw: np.ndarray        # the unclamped draw


def sample_action(params: PolicyParams, observation, rng: np.random.Generator,
                  deterministic: bool = False) -> ActionSample:
    mean, std = forward_policy(params, observation)
    if deterministic:
        raw = mean.copy()
    else:
        raw = mean + std * rng.standard_normal(mean.shape)
    logp = float(gaussian_log_prob(raw, mean, params.log_std))
    return ActionSample(np.clip(raw, -1.0, 1.0), logp, raw)


# ---------------------------------------------------------------- PPO pieces

@dataclass
class RolloutBatch:
    obs: np.ndarray        # (B, obs_dim)
    raw_actions: np.ndarray  # (B, act_dim)
    log_probs: np.ndarray  # (B,) under the behaviour parameters
    rewards: np.ndarray    # (B,)
    values: np.ndarray     # (B,) value estimates at collection time
    dones: Optional[np.ndarray] = None  # (B,) episode ends; all True at horizon 1

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=float).reshape(len(self.rewards), -1)
        self.raw_actions = np.asarray(self.raw_actions, dtype=float).reshape(len(self.rewards), -1)
        self.log_probs = np.asarray(self.log_probs, dtype=float)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.dones is None:
            self.dones = np.ones(len(self.rewards), dtype=bool)

    def __len__(self) -> int:
        return len(self.rewards)

    def subset(self, idx: np.ndarray) -> "RolloutBatch":
        return RolloutBatch(self.obs[idx], self.raw_actions[idx], self.log_probs[idx],
                            self.rewards[idx], self.values[idx], self.dones[idx])


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, gamma: float,
        lam: float, last_value: float = 0.0) -> np.ndarray:
    """Generalised advantage estimates for a sequence of transitions."""
    n = len(rewards)
    adv = np.zeros(n)
    running = 0.0
    next_value = last_value
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_value = values[t]
    return adv


def normalize(adv: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", over="ignore"):
        std = adv.std()
    if not np.isfinite(std) or std < 1e-12:
        return np.zeros_like(adv)
    return (adv - adv.mean()) / std


def advantage(batch: RolloutBatch, params: PolicyParams, cfg: PpoConfig = PpoConfig(),
              raw: bool = False) -> np.ndarray:
    v = value(params, batch.obs)
    adv = gae(batch.rewards, v, batch.dones, cfg.gamma, cfg.gae_lambda)
    if raw or not cfg.normalize_advantages:
        return adv
    return normalize(adv)


def clip_target(eps: float, adv):
    adv = np.asarray(adv, dtype=float)
    out = np.where(adv >= 0.0, (1.0 + eps) * adv, (1.0 - eps) * adv)
    return float(out) if out.ndim == 0 else out


@dataclass
class LossInfo:
    loss: float
    policy_objective: float
    entropy: float
    value_loss: float
    clip_fraction: float
    approx_kl: float


def surrogate_loss(params: PolicyParams, batch: RolloutBatch, adv: np.ndarray,
                   returns: np.ndarray, cfg: PpoConfig) -> tuple[LossInfo, dict]:
    """Loss to minimise and its gradient with respect to every array.

    loss = -(mean(min(ratio * A, g(clip, A))) + c * H) + value_coef * mean((V - R)^2)

    ``batch.log_probs`` must come from the parameters that generated the
    actions; ``params`` are the ones being optimised.
    """
    B = len(batch)
    pi_layers = params.layers("pi")
    z, pi_acts = mlp_forward(pi_layers, batch.obs)
    mean = np.tanh(z)
    log_std = params.log_std
    inv_var = np.exp(-2.0 * log_std)
    diff = batch.raw_actions - mean
    logp = np.sum(-0.5 * diff * diff * inv_var - log_std - 0.5 * _LOG_2PI, axis=1)
    ratio = np.exp(logp - batch.log_probs)
    unclipped = ratio * adv
    target = clip_target(cfg.clip, adv)
    active = unclipped <= target
    per_sample = np.where(active, unclipped, target)
    policy_obj = per_sample.mean()
    entropy = gaussian_entropy(log_std)

    v_out, v_acts = mlp_forward(params.layers("v"), batch.obs)
    v_err = v_out[:, 0] - returns
    value_loss = float(np.mean(v_err * v_err))

    loss = -policy_obj - cfg.entropy_coef * entropy + cfg.value_coef * value_loss
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    # d(loss)/d(logp_i) for samples on the unclipped branch
    dlogp = -np.where(active, unclipped, 0.0) / B
    dmean = dlogp[:, None] * diff * inv_var
    dz = dmean * (1.0 - mean * mean)
    dlog_std = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - cfg.entropy_coef

    grads = {}
    for k, (gW, gb) in enumerate(mlp_backward(pi_layers, pi_acts, dz)):
        grads[f"pi.W{k}"], grads[f"pi.b{k}"] = gW, gb
    grads["log_std"] = dlog_std
    dv = (2.0 * cfg.value_coef / B) * v_err[:, None]
    for k, (gW, gb) in enumerate(mlp_backward(params.layers("v"), v_acts, dv)):
        grads[f"v.W{k}"], grads[f"v.b{k}"] = gW, gb

    info = LossInfo(float(loss), float(policy_obj), entropy, value_loss,
                    float(np.mean(~active)), float(np.mean(batch.log_probs - logp)))
    return info, grads


# ---------------------------------------------------------------- optimiser

@dataclass
class OptimizerState:
    step: int = 0
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.step, {k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()})


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def apply_gradients(params: PolicyParams, grads: dict, opt: OptimizerState, cfg: PpoConfig) -> None:
    """One descent step on the loss, in place."""
    lr = cfg.learning_rate
    opt.step += 1
    if cfg.optimizer == "sgd":
        for k, g in grads.items():
            params.arrays[k] -= lr * g
    else:
        b1, b2 = cfg.adam_betas
        c1 = 1.0 - b1**opt.step
        c2 = 1.0 - b2**opt.step
        for k, g in grads.items():
            m = opt.m.setdefault(k, np.zeros_like(g))
            v = opt.v.setdefault(k, np.zeros_like(g))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params.arrays[k] -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    np.clip(params.arrays["log_std"], *LOG_STD_BOUNDS, out=params.arrays["log_std"])


def update(params: PolicyParams, batch: RolloutBatch, cfg: PpoConfig,
           rng: Optional[np.random.Generator] = None,
           opt: Optional[OptimizerState] = None) -> tuple[PolicyParams, list]:
    """Run the PPO epochs on one batch. Returns the new parameters and per-step loss info.

    ``opt`` is updated in place when given, so moment estimates carry over
    between batches.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    opt = OptimizerState() if opt is None else opt
    old = params
    adv = advantage(batch, old, cfg)
    returns = batch.rewards.copy()
    new = params.copy()
    history = []
    n = len(batch)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for idx in np.array_split(order, min(cfg.minibatches, n)):
            if idx.size == 0:
                continue
            info, grads = surrogate_loss(new, batch.subset(idx), adv[idx], returns[idx], cfg)
            clip_grad_norm(grads, cfg.max_grad_norm)
            apply_gradients(new, grads, opt, cfg)
            history.append(info)
    if not new.all_finite():
        raise NonFiniteLoss("parameters became non-finite")
    return new, history


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path: str | Path, params: PolicyParams,
                    opt: Optional[OptimizerState] = None) -> Path:
    """Binary layout, little-endian throughout.

    magic (8 bytes) | version u32 | obs_dim u32 | act_dim u32 | n_hidden u32 |
    hidden sizes u32 * n_hidden | has_optimizer u32 | optimizer step u64 |
    float64 arrays in ``params.names()`` order, row-major |
    (when has_optimizer) first moments then second moments in the same order.
    """
    path = Path(path)
    has_opt = opt is not None and bool(opt.m)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIII", CHECKPOINT_VERSION, params.obs_dim, params.act_dim,
                             len(params.hidden)))
        fh.write(struct.pack(f"<{len(params.hidden)}I", *params.hidden))
        fh.write(struct.pack("<IQ", int(has_opt), opt.step if opt is not None else 0))
        for k in params.names():
            fh.write(np.ascontiguousarray(params.arrays[k], dtype="<f8").tobytes())
        if has_opt:
            for store in (opt.m, opt.v):
                for k in params.names():
                    fh.write(np.ascontiguousarray(store[k], dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[PolicyParams, Optional[OptimizerState]]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a policy checkpoint")
    off = 8
    version, obs_dim, act_dim, nh = struct.unpack_from("<IIII", data, off)
    off += 16
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    hidden = struct.unpack_from(f"<{nh}I", data, off)
    off += 4 * nh
    has_opt, step = struct.unpack_from("<IQ", data, off)
    off += 12
    template = init_params(obs_dim, act_dim, hidden, np.random.default_rng(0))

    def read_all():
        nonlocal off
        out = {}
        for k in template.names():
            shape = template.arrays[k].shape
            count = int(np.prod(shape))
            out[k] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(float)
            off += 8 * count
        return out

    params = PolicyParams(obs_dim, act_dim, tuple(hidden), read_all())
    opt = None
    if has_opt:
        opt = OptimizerState(step, read_all(), read_all())
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return params, opt
