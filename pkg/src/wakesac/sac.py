"""Soft Actor-Critic with twin Q critics, target networks and automatic
temperature tuning, on top of the numpy kernel in :mod:`wakesac.nn`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .env import sample_episode
from .nn import (AdamState, GaussianPolicyOutput, MlpParams, SquashConfig, UNIT_SQUASH,
                 adam_step, deterministic_action, init_mlp, load_params, mlp_backward,
                 mlp_forward, mse_loss, sample_squashed, save_params)


@dataclass(frozen=True)
class SacConfig:
    discount: float = 0.99
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    tau: float = 5e-3
    batch_size: int = 256
    buffer_capacity: int = 1_000_000
    warmup_steps: int = 1000
    init_alpha: float = 0.2
    auto_alpha: bool = True
    target_entropy: float | None = None  # defaults to -action_dim
    updates_per_step: int = 1
    hidden: tuple[int, ...] = (256, 256)

    def __post_init__(self):
        if not 0 < self.discount < 1:
            raise ValueError("discount must lie in (0, 1)")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.buffer_capacity < self.batch_size:
            raise ValueError("buffer_capacity must be >= batch_size")

    def to_dict(self) -> dict:
        return asdict(self)


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with uniform sampling."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done):
        i = self.cursor
        self.obs[i], self.act[i], self.rew[i], self.next_obs[i], self.done[i] = s, a, r, s2, done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        idx = rng.integers(self.size, size=batch_size)
        return {"obs": self.obs[idx], "act": self.act[idx], "rew": self.rew[idx],
                "next_obs": self.next_obs[idx], "done": self.done[idx]}


def polyak_update(targets: MlpParams, online: MlpParams, tau: float) -> MlpParams:
    for t, o in zip(targets.arrays(), online.arrays()):
        t *= 1.0 - tau
        t += tau * o
    return targets


def _q(net: MlpParams, obs, act):
    x = np.concatenate([obs, act], axis=-1)
    q, cache = mlp_forward(net, x)
    return q[:, 0], cache


def critic_target(actor, q1_targ, q2_targ, batch, alpha: float, discount: float,
                  noise, squash: SquashConfig = UNIT_SQUASH) -> np.ndarray:
    """Soft Bellman target ``r + discount (1 - done) (min Qbar(s', a') - alpha log pi(a'|s'))``."""
    raw, _ = mlp_forward(actor, batch["next_obs"])
    s = sample_squashed(GaussianPolicyOutput.from_raw(raw), squash, noise=noise)
    q1, _ = _q(q1_targ, batch["next_obs"], s.action)
    q2, _ = _q(q2_targ, batch["next_obs"], s.action)
    soft = np.minimum(q1, q2) - alpha * s.logprob
    return batch["rew"] + discount * (1.0 - batch["done"]) * soft


def critic_loss(q: MlpParams, batch, target):
    return mse_loss(q, np.concatenate([batch["obs"], batch["act"]], axis=-1), target)


def actor_loss(actor: MlpParams, q1: MlpParams, q2: MlpParams, obs, alpha: float, noise,
               squash: SquashConfig = UNIT_SQUASH):
    """Reparameterised ``mean(alpha log pi(a|s) - min(Q1, Q2)(s, a))``.

    Returns (loss, actor grads, log-probabilities of the sampled actions).
    """
    raw, a_cache = mlp_forward(actor, obs)
    out = GaussianPolicyOutput.from_raw(raw)
    s = sample_squashed(out, squash, noise=noise)
    v1, c1 = _q(q1, obs, s.action)
    v2, c2 = _q(q2, obs, s.action)
    use1 = (v1 <= v2).astype(float)
    qmin = np.where(use1 > 0, v1, v2)
    n = len(qmin)
    loss = float(np.mean(alpha * s.logprob - qmin))

    obs_dim = obs.shape[1]
    _, gx1 = mlp_backward(q1, c1, (-use1 / n)[:, None])
    _, gx2 = mlp_backward(q2, c2, (-(1.0 - use1) / n)[:, None])
    g_act = (gx1 + gx2)[:, obs_dim:]

    t = np.tanh(s.pre_tanh)
    sigma = np.exp(out.log_std)
    dadu = np.asarray(squash.scale) * (1.0 - t * t)
    g_u = g_act * dadu + (alpha / n) * 2.0 * t      # through the action and the tanh Jacobian
    g_mu = g_u
    g_ls = g_u * sigma * s.noise - alpha / n       # -log sigma term of log N
    grads, _ = mlp_backward(actor, a_cache, out.raw_grad(g_mu, g_ls))
    return loss, grads, s.logprob


class SacAgent:
    def __init__(self, obs_dim: int, act_dim: int, config: SacConfig = SacConfig(),
                 seed: int = 0, squash: SquashConfig = UNIT_SQUASH):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.config = config
        self.squash = squash
        self.rng = np.random.default_rng(seed)
        h = list(config.hidden)
        self.actor = init_mlp([obs_dim] + h + [2 * act_dim], self.rng, out_scale=1e-2)
        self.q1 = init_mlp([obs_dim + act_dim] + h + [1], self.rng)
        self.q2 = init_mlp([obs_dim + act_dim] + h + [1], self.rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_alpha = math.log(config.init_alpha)
        self.target_entropy = (-float(act_dim) if config.target_entropy is None
                               else config.target_entropy)
        self.reset_optimizers()

    def reset_optimizers(self):
        self.actor_opt = AdamState.zeros(self.actor)
        self.q1_opt = AdamState.zeros(self.q1)
        self.q2_opt = AdamState.zeros(self.q2)
        self._alpha_m = self._alpha_v = 0.0
        self._alpha_t = 0

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    def policy(self, obs) -> GaussianPolicyOutput:
        raw, _ = mlp_forward(self.actor, obs)
        return GaussianPolicyOutput.from_raw(raw)

    def act(self, obs, deterministic: bool = False, rng: np.random.Generator | None = None):
        out = self.policy(obs)
        if deterministic:
            return deterministic_action(out, self.squash)
        return sample_squashed(out, self.squash, rng or self.rng).action

    def update(self, batch: dict) -> dict:
        cfg = self.config
        alpha = self.alpha
        n = len(batch["rew"])
        y = critic_target(self.actor, self.q1_target, self.q2_target, batch, alpha,
                          cfg.discount, self.rng.standard_normal((n, self.act_dim)), self.squash)
        l1, g1 = critic_loss(self.q1, batch, y)
        l2, g2 = critic_loss(self.q2, batch, y)
        adam_step(self.q1, g1, self.q1_opt, cfg.critic_lr)
        adam_step(self.q2, g2, self.q2_opt, cfg.critic_lr)

        la, ga, logp = actor_loss(self.actor, self.q1, self.q2, batch["obs"], alpha,
                                  self.rng.standard_normal((n, self.act_dim)), self.squash)
        adam_step(self.actor, ga, self.actor_opt, cfg.actor_lr)

        if cfg.auto_alpha:
            g = -float(np.mean(logp + self.target_entropy))
            self._alpha_t += 1
            self._alpha_m = 0.9 * self._alpha_m + 0.1 * g
            self._alpha_v = 0.999 * self._alpha_v + 0.001 * g * g
            m_hat = self._alpha_m / (1 - 0.9**self._alpha_t)
            v_hat = self._alpha_v / (1 - 0.999**self._alpha_t)
            self.log_alpha -= cfg.alpha_lr * m_hat / (math.sqrt(v_hat) + 1e-8)

        polyak_update(self.q1_target, self.q1, cfg.tau)
        polyak_update(self.q2_target, self.q2, cfg.tau)
        return {"critic_loss": 0.5 * (l1 + l2), "critic1_loss": l1, "critic2_loss": l2,
                "actor_loss": la, "alpha": self.alpha, "entropy": -float(np.mean(logp))}

    # -- persistence -------------------------------------------------------

    def nets(self) -> dict[str, MlpParams]:
        return {"actor": self.actor, "q1": self.q1, "q2": self.q2,
                "q1_target": self.q1_target, "q2_target": self.q2_target}

    def save(self, path, meta: dict | None = None):
        save_params(path, self.nets(), {"log_alpha": self.log_alpha, **(meta or {})})

    def load(self, path):
        expect = {k: v.sizes for k, v in self.nets().items()}
        nets, meta = load_params(path, expect)
        for k, v in nets.items():
            self.nets()[k].assign(v)
        self.log_alpha = float(meta["log_alpha"])
        return meta


@dataclass
class TrainResult:
    snapshots: list = field(default_factory=list)  # (step, payload) pairs
    log: list = field(default_factory=list)        # per-episode rows

    LOG_COLUMNS = ("step", "episode_return", "critic_loss", "actor_loss", "alpha", "entropy")


def snapshot_steps(total_steps: int, snapshot_every: int) -> list[int]:
    if snapshot_every <= 0:
        return [0]
    return list(range(0, total_steps + 1, snapshot_every))


def train_online(env_factory: Callable, agent: SacAgent, total_steps: int, snapshot_every: int,
                 seed: int = 0, on_snapshot: Callable | None = None,
                 episode_sampler: Callable = sample_episode) -> TrainResult:
    """Run SAC against freshly sampled episodes.

    ``on_snapshot(step, agent)`` is called at step 0 and every
    ``snapshot_every`` steps; its return value is stored with the step.
    Time-limit episode ends are stored as non-terminal transitions.
    """
    cfg = agent.config
    env = env_factory()
    rng = np.random.default_rng(seed)
    buffer = ReplayBuffer(min(cfg.buffer_capacity, max(total_steps, cfg.batch_size)),
                          env.obs_dim, env.action_dim)
    result = TrainResult()
    marks = set(snapshot_steps(total_steps, snapshot_every))
    save = on_snapshot or (lambda step, ag: {k: v.copy() for k, v in ag.nets().items()})

    def snap(step):
        if step in marks:
            result.snapshots.append((step, save(step, agent)))

    snap(0)
    step = 0
    while step < total_steps:
        spec = episode_sampler(rng, env.action_dim, len(env.boxes))
        obs = env.reset(spec)
        done = False
        ep_return = 0.0
        diags = []
        while not done and step < total_steps:
            a = agent.act(obs)
            obs2, r, done, _ = env.step(a)
            buffer.add(obs, a, r, obs2, 0.0)
            obs = obs2
            ep_return += r
            step += 1
            if step > cfg.warmup_steps and len(buffer) >= cfg.batch_size:
                for _ in range(cfg.updates_per_step):
                    diags.append(agent.update(buffer.sample(cfg.batch_size, agent.rng)))
            snap(step)
        row = {"step": step, "episode_return": ep_return}
        for key in ("critic_loss", "actor_loss", "alpha", "entropy"):
            row[key] = float(np.mean([d[key] for d in diags])) if diags else float("nan")
        result.log.append(row)
    return result
