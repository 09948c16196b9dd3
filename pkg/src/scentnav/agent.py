"""Masked stochastic policy and likelihood-ratio policy-gradient training.

The policy is a small two-hidden-layer network over the flattened observation
with an action-logit head and a scalar state-value head. Infeasible actions
are forced to probability exactly zero by replacing their logits with a large
negative constant before the softmax. Training is advantage-weighted
REINFORCE: Monte-Carlo discounted returns, a learned value baseline, entropy
regularization, and Adam on a flat parameter vector. Everything is float64
numpy, so gradients can be checked against finite differences directly.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .env import EnvConfig, EpisodeLog, NavigationEnv, Observation, observation_size

NEG_INF = -1.0e30


class ShapeMismatch(ValueError):
    pass


class DivergenceDetected(RuntimeError):
    pass


@dataclass(frozen=True)
class PolicySpec:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"  # or "tanh"
    n_max: int = 12
    panel_rows: int = 5

    def __post_init__(self):
        if len(self.hidden) != 2:
            raise ValueError("policy uses exactly two hidden layers")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_actions(self) -> int:
        return self.n_max + 2

    @property
    def input_dim(self) -> int:
        return observation_size(EnvConfig(n_max=self.n_max, panel_rows=self.panel_rows))

    def to_dict(self) -> dict:
        return {
            "hidden": list(self.hidden),
            "activation": self.activation,
            "n_max": self.n_max,
            "panel_rows": self.panel_rows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicySpec":
        return cls(
            hidden=tuple(d["hidden"]),
            activation=d["activation"],
            n_max=d["n_max"],
            panel_rows=d["panel_rows"],
        )


def _param_shapes(spec: PolicySpec) -> list[tuple[str, tuple[int, ...]]]:
    d, (h1, h2), a = spec.input_dim, spec.hidden, spec.n_actions
    return [
        ("W1", (d, h1)), ("b1", (h1,)),
        ("W2", (h1, h2)), ("b2", (h2,)),
        ("Wp", (h2, a)), ("bp", (a,)),
        ("Wv", (h2, 1)), ("bv", (1,)),
    ]


def param_count(spec: PolicySpec) -> int:
    return sum(int(np.prod(s)) for _, s in _param_shapes(spec))


def _views(spec: PolicySpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    out = {}
    i = 0
    for name, shape in _param_shapes(spec):
        n = int(np.prod(shape))
        out[name] = flat[i : i + n].reshape(shape)
        i += n
    if i != flat.size:
        raise ShapeMismatch(f"parameter vector has {flat.size} entries, expected {i}")
    return out


class Policy:
    """Flat-parameter MLP policy with a masked softmax head and value head."""

    def __init__(self, spec: PolicySpec, params: np.ndarray):
        if params.dtype != np.float64:
            params = params.astype(np.float64)
        self.spec = spec
        self.params = params
        self.p = _views(spec, self.params)

    @classmethod
    def init(cls, spec: PolicySpec, seed: int) -> "Policy":
        """He-initialized trunk; zero heads, so the initial policy is uniform
        over legal actions and the initial value estimate is zero."""
        rng = np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1)))
        flat = np.zeros(param_count(spec), dtype=np.float64)
        views = _views(spec, flat)
        d, (h1, h2) = spec.input_dim, spec.hidden
        views["W1"][:] = rng.normal(0.0, math.sqrt(2.0 / d), size=views["W1"].shape)
        views["W2"][:] = rng.normal(0.0, math.sqrt(2.0 / h1), size=views["W2"].shape)
        return cls(spec, flat)

    def _act_fn(self, z: np.ndarray) -> np.ndarray:
        return np.maximum(z, 0.0) if self.spec.activation == "relu" else np.tanh(z)

    def _act_grad(self, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        return (z > 0).astype(np.float64) if self.spec.activation == "relu" else 1.0 - a * a

    def _forward(self, X: np.ndarray, mask: np.ndarray) -> dict:
        if X.ndim != 2 or X.shape[1] != self.spec.input_dim:
            raise ShapeMismatch(f"input shape {X.shape}, expected (B, {self.spec.input_dim})")
        p = self.p
        z1 = X @ p["W1"] + p["b1"]
        a1 = self._act_fn(z1)
        z2 = a1 @ p["W2"] + p["b2"]
        a2 = self._act_fn(z2)
        logits = a2 @ p["Wp"] + p["bp"]
        masked = np.where(mask, logits, NEG_INF)
        mx = masked.max(axis=1, keepdims=True)
        e = np.exp(masked - mx)
        z = e.sum(axis=1, keepdims=True)
        probs = e / z
        logp = masked - mx - np.log(z)
        values = (a2 @ p["Wv"] + p["bv"]).ravel()
        return {
            "X": X, "mask": mask, "z1": z1, "a1": a1, "z2": z2, "a2": a2,
            "probs": probs, "logp": logp, "values": values,
        }

    def distribution(self, obs: Observation) -> tuple[np.ndarray, float]:
        """Action probabilities (zero on masked actions) and the value estimate."""
        f = self._forward(obs.vector()[None, :], obs.mask[None, :])
        return f["probs"][0], float(f["values"][0])

    def act(self, obs: Observation, rng: np.random.Generator) -> int:
        probs, _ = self.distribution(obs)
        u = rng.random()
        return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(probs) - 1))

    def greedy(self, obs: Observation) -> int:
        probs, _ = self.distribution(obs)
        return int(np.argmax(probs))

    # -- batched loss and exact gradient ------------------------------------

    def loss_and_grad(
        self,
        X: np.ndarray,
        mask: np.ndarray,
        actions: np.ndarray,
        advantages: np.ndarray,
        value_targets: np.ndarray,
        entropy_coef: float = 0.0,
        vf_coef: float = 0.0,
    ) -> tuple[float, np.ndarray, dict]:
        """Mean policy-gradient surrogate loss with entropy and value terms.

        Returns (loss, flat gradient, stats). Advantages are treated as
        constants; the value head is trained toward ``value_targets``.
        """
        B = X.shape[0]
        f = self._forward(X, mask)
        probs, logp, values = f["probs"], f["logp"], f["values"]
        idx = np.arange(B)
        chosen_logp = logp[idx, actions]

        plogp = np.where(probs > 0.0, probs * logp, 0.0)
        entropy = -plogp.sum(axis=1)
        verr = values - value_targets

        pg_loss = -(advantages * chosen_logp).mean()
        ent_loss = -entropy.mean()
        v_loss = 0.5 * (verr**2).mean()
        loss = pg_loss + entropy_coef * ent_loss + vf_coef * v_loss
        if not np.isfinite(loss):
            raise DivergenceDetected(f"non-finite loss {loss}")

        # d loss / d masked-logits
        onehot = np.zeros_like(probs)
        onehot[idx, actions] = 1.0
        dlogits = -(advantages[:, None] / B) * (onehot - probs)
        if entropy_coef:
            safe_logp = np.where(probs > 0.0, logp, 0.0)
            dH = -probs * (safe_logp + entropy[:, None])
            dlogits += entropy_coef * (-dH / B)
        dlogits *= mask  # masked logits are constants

        dvalues = vf_coef * verr / B

        p = self.p
        a2, a1, Xb = f["a2"], f["a1"], f["X"]
        grad = np.zeros_like(self.params)
        g = _views(self.spec, grad)
        g["Wp"][:] = a2.T @ dlogits
        g["bp"][:] = dlogits.sum(axis=0)
        g["Wv"][:] = (a2.T @ dvalues[:, None])
        g["bv"][:] = dvalues.sum()
        da2 = dlogits @ p["Wp"].T + dvalues[:, None] @ p["Wv"].T
        dz2 = da2 * self._act_grad(f["z2"], a2)
        g["W2"][:] = a1.T @ dz2
        g["b2"][:] = dz2.sum(axis=0)
        da1 = dz2 @ p["W2"].T
        dz1 = da1 * self._act_grad(f["z1"], a1)
        g["W1"][:] = Xb.T @ dz1
        g["b1"][:] = dz1.sum(axis=0)

        stats = {
            "pg_loss": float(pg_loss),
            "entropy": float(entropy.mean()),
            "v_loss": float(v_loss),
        }
        return float(loss), grad, stats

    def values(self, X: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return self._forward(X, mask)["values"]


def policy_forward(policy: Policy, obs: Observation) -> tuple[np.ndarray, float]:
    return policy.distribution(obs)


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """Returns-to-go G_t computed by reverse accumulation."""
    out = np.empty(len(rewards), dtype=np.float64)
    g = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        g = rewards[i] + gamma * g
        out[i] = g
    return out


class Adam:
    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainConfig:
    gamma: float = 0.99
    lr: float = 3e-3
    episodes_per_update: int = 32
    total_episodes: int = 4800
    entropy_coef: float = 0.01
    vf_coef: float = 0.5
    seed: int = 0
    normalize_advantage: bool = True
    grad_clip: float = 5.0
    return_scale: float = 20.0  # returns divided by this before the value fit

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma, "lr": self.lr,
            "episodes_per_update": self.episodes_per_update,
            "total_episodes": self.total_episodes,
            "entropy_coef": self.entropy_coef, "vf_coef": self.vf_coef,
            "seed": self.seed, "normalize_advantage": self.normalize_advantage,
            "grad_clip": self.grad_clip, "return_scale": self.return_scale,
        }


@dataclass
class CurvePoint:
    update_idx: int
    mean_return: float
    success_rate: float
    mean_steps: float


def curve_to_csv(curve: Sequence[CurvePoint]) -> str:
    lines = ["update_idx,mean_return,success_rate,mean_steps"]
    for c in curve:
        lines.append(f"{c.update_idx},{c.mean_return!r},{c.success_rate!r},{c.mean_steps!r}")
    return "\n".join(lines) + "\n"


EnvFactory = Callable[[int], NavigationEnv]


def _episode_seed(master: int, episode: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master & (2**64 - 1), episode, stream])


def collect_episode(
    env: NavigationEnv, policy: Policy, env_seed: int, action_rng: np.random.Generator
):
    """Roll one episode; returns per-step tensors plus the finished env."""
    obs = env.reset(seed=env_seed)
    xs, masks, acts, rewards = [], [], [], []
    while not env.done:
        a = policy.act(obs, action_rng)
        xs.append(obs.vector())
        masks.append(obs.mask.copy())
        acts.append(a)
        out = env.step(a)
        rewards.append(out.reward)
        obs = out.observation
    return xs, masks, acts, rewards


def train(
    env_factory: EnvFactory,
    policy_spec: PolicySpec,
    cfg: TrainConfig,
    policy: Optional[Policy] = None,
) -> tuple[Policy, list[CurvePoint]]:
    """REINFORCE with a learned value baseline over episodes from the factory.

    ``env_factory(i)`` must deterministically build the environment for
    episode ``i``; seeds for environment noise and action sampling derive from
    ``cfg.seed`` and ``i``, so training is reproducible end to end.
    """
    if policy is None:
        init_seed = int(_episode_seed(cfg.seed, 0, 2).generate_state(1)[0])
        policy = Policy.init(policy_spec, init_seed)
    opt = Adam(policy.params.size, cfg.lr)
    n_updates = max(1, cfg.total_episodes // cfg.episodes_per_update)
    curve: list[CurvePoint] = []
    episode = 0

    for update in range(n_updates):
        xs, masks, acts, rets = [], [], [], []
        ep_returns, ep_steps, ep_success = [], [], []
        for _ in range(cfg.episodes_per_update):
            env = env_factory(episode)
            env_seed = int(_episode_seed(cfg.seed, episode, 0).generate_state(1)[0])
            action_rng = np.random.default_rng(_episode_seed(cfg.seed, episode, 1))
            x, m, a, r = collect_episode(env, policy, env_seed, action_rng)
            g = discounted_returns(r, cfg.gamma) / cfg.return_scale
            xs.extend(x)
            masks.extend(m)
            acts.extend(a)
            rets.extend(g.tolist())
            ep_returns.append(env.episode_return())
            ep_steps.append(env.step_count)
            ep_success.append(env.success)
            episode += 1

        X = np.asarray(xs)
        M = np.asarray(masks)
        A = np.asarray(acts, dtype=np.intp)
        G = np.asarray(rets)
        V = policy.values(X, M)
        adv = G - V
        if cfg.normalize_advantage:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        _, grad, _ = policy.loss_and_grad(
            X, M, A, adv, G, entropy_coef=cfg.entropy_coef, vf_coef=cfg.vf_coef
        )
        if cfg.grad_clip:
            norm = float(np.linalg.norm(grad))
            if norm > cfg.grad_clip:
                grad *= cfg.grad_clip / norm
        opt.step(policy.params, grad)

        curve.append(
            CurvePoint(
                update_idx=update,
                mean_return=float(np.mean(ep_returns)),
                success_rate=float(np.mean(ep_success)),
                mean_steps=float(np.mean(ep_steps)),
            )
        )
    return policy, curve


def evaluate(
    policy: Policy,
    layout,
    goal: Optional[int],
    n_episodes: int,
    seed: int,
    mem_params,
    env_cfg: EnvConfig = EnvConfig(),
    condition: Optional[str] = None,
    goal_index: Optional[int] = None,
) -> list[EpisodeLog]:
    """Stochastic policy rollouts with per-episode derived seeds."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    logs = []
    for i in range(n_episodes):
        env = NavigationEnv(layout, mem_params, env_cfg)
        env_seed = int(_episode_seed(seed, i, 0).generate_state(1)[0])
        action_rng = np.random.default_rng(_episode_seed(seed, i, 1))
        obs = env.reset(seed=env_seed, goal=goal)
        while not env.done:
            obs = env.step(policy.act(obs, action_rng)).observation
        logs.append(env.episode_log(condition=condition, goal_index=goal_index))
    return logs


def evaluate_random(
    layout,
    goal: Optional[int],
    n_episodes: int,
    seed: int,
    mem_params,
    env_cfg: EnvConfig = EnvConfig(),
) -> list[EpisodeLog]:
    """Uniform-random-legal-action baseline rollouts."""
    logs = []
    for i in range(n_episodes):
        env = NavigationEnv(layout, mem_params, env_cfg)
        env_seed = int(_episode_seed(seed, i, 0).generate_state(1)[0])
        rng = np.random.default_rng(_episode_seed(seed, i, 1))
        obs = env.reset(seed=env_seed, goal=goal)
        while not env.done:
            legal = np.flatnonzero(obs.mask)
            obs = env.step(int(legal[rng.integers(len(legal))])).observation
        logs.append(env.episode_log())
    return logs


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"SNAVCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, policy: Policy, extra: Optional[dict] = None) -> None:
    """Versioned header (JSON) followed by the little-endian float32 block."""
    header = {
        "version": CKPT_VERSION,
        "spec": policy.spec.to_dict(),
        "param_count": int(policy.params.size),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(policy.params.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[Policy, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        if header["version"] != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        spec = PolicySpec.from_dict(header["spec"])
        raw = np.frombuffer(f.read(), dtype="<f4").astype(np.float64)
    if raw.size != header["param_count"] or raw.size != param_count(spec):
        raise ShapeMismatch("checkpoint parameter block has the wrong size")
    return Policy(spec, raw), header
