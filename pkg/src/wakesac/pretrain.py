"""Expert demonstrations and offline pretraining of the SAC actor and critics."""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .env import EpisodeSpec, WindFarmEnv, denormalize_obs, sample_episode, tracking_action
from .nn import AdamState, MlpParams, SquashConfig, UNIT_SQUASH, adam_step, bc_loss, mse_loss
from .util import config_hash
from .wake import InflowCondition
from .yaw_opt import DEFAULT_REFINE, SerialRefineSettings, expert_yaw_targets

log = logging.getLogger(__name__)

DATASET_SIZES = {"None": 0, "Small": 10, "Medium": 50, "Large": 200}
RETURN_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class PretrainConfig:
    actor_lr: float = 3e-5
    critic_lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 5
    split: float = 0.8
    seed: int = 0
    discount: float = 0.99
    # rescale the critic output layer back to raw-return units after fitting
    denormalize_critic: bool = False

    def __post_init__(self):
        if not 0 < self.split < 1:
            raise ValueError("split must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    obs: np.ndarray       # (T, obs_dim)
    actions: np.ndarray   # (T, act_dim)
    rewards: np.ndarray   # (T,)
    spec: EpisodeSpec | None = None

    def __len__(self):
        return len(self.rewards)


@dataclass
class ExpertDataset:
    trajectories: list[Trajectory] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    @property
    def n_pairs(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def save(self, path):
        trajs = self.trajectories
        specs = [_spec_to_dict(t.spec) for t in trajs]
        header = {"n_episodes": len(trajs), "lengths": [len(t) for t in trajs],
                  "specs": specs, "meta": self.meta}
        obs_dim = trajs[0].obs.shape[1] if trajs else 0
        act_dim = trajs[0].actions.shape[1] if trajs else 0
        cat = (lambda xs, w: np.concatenate(xs) if xs else np.zeros((0, w)))
        buf = io.BytesIO()
        np.savez(buf, header=np.array(json.dumps(header)),
                 obs=cat([t.obs for t in trajs], obs_dim),
                 actions=cat([t.actions for t in trajs], act_dim),
                 rewards=np.concatenate([t.rewards for t in trajs]) if trajs else np.zeros(0))
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path, env_hash: str | None = None) -> "ExpertDataset":
        """Read a dataset file; with ``env_hash`` the stored environment hash must match."""
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            obs, actions, rewards = data["obs"], data["actions"], data["rewards"]
        meta = header["meta"]
        if env_hash is not None and meta.get("env_config_hash") != env_hash:
            raise ValueError(f"{path}: dataset was generated with a different environment config")
        trajs, start = [], 0
        for n, spec in zip(header["lengths"], header["specs"]):
            sl = slice(start, start + n)
            trajs.append(Trajectory(obs[sl], actions[sl], rewards[sl], _spec_from_dict(spec)))
            start += n
        return cls(trajs, meta)


def _spec_to_dict(spec: EpisodeSpec | None):
    if spec is None:
        return None
    return {"inflow": asdict(spec.inflow), "initial_yaws": list(spec.initial_yaws),
            "turbulence_box_id": spec.turbulence_box_id, "rng_seed": spec.rng_seed}


def _spec_from_dict(d):
    if d is None:
        return None
    return EpisodeSpec(InflowCondition(**d["inflow"]), tuple(d["initial_yaws"]),
                       d["turbulence_box_id"], d["rng_seed"])


def run_expert_episode(env: WindFarmEnv, spec: EpisodeSpec,
                       settings: SerialRefineSettings = DEFAULT_REFINE) -> Trajectory:
    """Track the steady-state optimum for the true inflow at the yaw rate limit."""
    target = expert_yaw_targets(spec.inflow, env.layout, settings, env.model)
    step = env.config.max_yaw_step
    obs = env.reset(spec)
    rows_o, rows_a, rows_r = [], [], []
    done = False
    while not done:
        yaw = denormalize_obs(obs, env.config)[:, 2]
        a = tracking_action(target, yaw, step)
        nxt, r, done, _ = env.step(a)
        rows_o.append(obs)
        rows_a.append(a)
        rows_r.append(r)
        obs = nxt
    return Trajectory(np.array(rows_o), np.array(rows_a), np.array(rows_r), spec)


def generate_expert_dataset(n_episodes: int, rng: np.random.Generator,
                            env_factory: Callable[[], WindFarmEnv],
                            settings: SerialRefineSettings = DEFAULT_REFINE) -> ExpertDataset:
    if n_episodes < 0:
        raise ValueError("n_episodes must be >= 0")
    env = env_factory()
    specs = [sample_episode(rng, env.action_dim, len(env.boxes)) for _ in range(n_episodes)]
    trajs = [run_expert_episode(env, s, settings) for s in specs]
    meta = {"n_episodes": n_episodes, "seeds": [s.rng_seed for s in specs],
            "env_config_hash": env_hash(env)}
    return ExpertDataset(trajs, meta)


def env_hash(env: WindFarmEnv) -> str:
    return config_hash({"env": env.config.to_dict(), "positions": env.layout.positions.tolist(),
                        "boxes": [b.header() for b in env.boxes]})


# ---------------------------------------------------------------------------
# Returns and splitting
# ---------------------------------------------------------------------------

def discounted_returns(rewards, discount: float) -> np.ndarray:
    r = np.asarray(rewards, float)
    if r.size == 0:
        raise ValueError("rewards must be non-empty")
    g = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + discount * acc
        g[t] = acc
    return g


def normalize_returns(values, mean: float | None = None, std: float | None = None):
    """Standardise returns; returns (targets, mean, std).

    Statistics default to those of ``values`` (population std). A spread
    below the floor maps everything to zero.
    """
    g = np.asarray(values, float)
    if mean is None:
        if g.size < 2:
            raise ValueError("need at least two values to normalise")
        mean, std = float(g.mean()), float(g.std())
    if std < RETURN_STD_FLOOR:
        return np.zeros_like(g), mean, RETURN_STD_FLOOR
    return (g - mean) / std, mean, std


def split_indices(n: int, rng: np.random.Generator, frac: float = 0.8):
    """Shuffled train/validation index split with ``n_val = max(1, round(0.2 n))``."""
    if n < 1:
        raise ValueError("cannot split an empty dataset")
    n_val = max(1, int(math.floor((1.0 - frac) * n + 0.5)))
    n_val = min(n_val, n - 1) if n > 1 else 1
    perm = rng.permutation(n)
    return perm[n_val:], perm[:n_val]


def flatten(dataset: ExpertDataset, discount: float):
    if len(dataset) == 0 or dataset.n_pairs == 0:
        raise ValueError("dataset is empty")
    obs = np.concatenate([t.obs for t in dataset.trajectories])
    act = np.concatenate([t.actions for t in dataset.trajectories])
    ret = np.concatenate([discounted_returns(t.rewards, discount) for t in dataset.trajectories])
    return {"obs": obs, "act": act, "ret": ret}


def split_dataset(dataset: ExpertDataset, rng: np.random.Generator, frac: float = 0.8,
                  discount: float = 0.99):
    """Flat (obs, action, return) pairs split into train and validation dicts."""
    pairs = flatten(dataset, discount)
    tr, va = split_indices(len(pairs["ret"]), rng, frac)
    return ({k: v[tr] for k, v in pairs.items()}, {k: v[va] for k, v in pairs.items()})


# ---------------------------------------------------------------------------
# Early-stopped fitting
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    params: MlpParams
    best_epoch: int
    stop_epoch: int
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)  # index 0 is the initial params

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]


def fit_early_stopping(params: MlpParams, train_epoch: Callable[[MlpParams, int], float],
                       val_loss: Callable[[MlpParams], float], max_epochs: int,
                       patience: int) -> FitResult:
    """Epoch loop with patience-based early stopping and best-parameter restore.

    The initial parameters are scored as epoch 0 so the result can never be
    worse on validation than the starting point.
    """
    best = val_loss(params)
    best_params, best_epoch = params.copy(), 0
    res = FitResult(params, 0, 0, [], [best])
    wait = 0
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        res.train_loss.append(train_epoch(params, epoch))
        loss = val_loss(params)
        res.val_loss.append(loss)
        if loss < best:
            best, best_epoch, wait = loss, epoch, 0
            best_params = params.copy()
        else:
            wait += 1
        if wait >= patience:
            break
    params.assign(best_params)
    res.best_epoch, res.stop_epoch = best_epoch, epoch
    return res


def _minibatch_epoch(params, data: dict, loss_fn, opt: AdamState, lr: float, batch: int,
                     rng: np.random.Generator) -> float:
    n = len(next(iter(data.values())))
    perm = rng.permutation(n)
    total = 0.0
    for start in range(0, n, batch):
        idx = perm[start:start + batch]
        loss, grads = loss_fn(params, {k: v[idx] for k, v in data.items()})
        adam_step(params, grads, opt, lr)
        total += loss * len(idx)
    return total / n


def bc_pretrain_actor(actor: MlpParams, dataset: ExpertDataset, config: PretrainConfig = PretrainConfig(),
                      squash: SquashConfig = UNIT_SQUASH, split=None) -> FitResult:
    """Behaviour cloning: minimise the negative log-likelihood of expert actions.

    Updates ``actor`` in place and returns the fit history. ``split`` may be a
    precomputed (train, val) pair from :func:`split_dataset`.
    """
    rng = np.random.default_rng(config.seed)
    train, val = split or split_dataset(dataset, rng, config.split, config.discount)
    if len(train["act"]) + len(val["act"]) < 2:
        raise ValueError("behaviour cloning needs at least two state-action pairs")
    shuffle = np.random.default_rng([config.seed, 1])
    opt = AdamState.zeros(actor)

    def loss_fn(p, b):
        return bc_loss(p, b["obs"], b["act"], squash)

    data = {"obs": train["obs"], "act": train["act"]}
    res = fit_early_stopping(
        actor,
        lambda p, _: _minibatch_epoch(p, data, loss_fn, opt, config.actor_lr, config.batch_size, shuffle),
        lambda p: bc_loss(p, val["obs"], val["act"], squash, grad=False)[0],
        config.max_epochs, config.patience)
    log.info("actor BC: best epoch %d of %d, val NLL %.4f", res.best_epoch, res.stop_epoch,
             res.best_val_loss)
    return res


@dataclass
class CriticPretrainResult:
    fits: list[FitResult]
    return_mean: float
    return_std: float


def pretrain_critic(critics: list[MlpParams], dataset: ExpertDataset,
                    config: PretrainConfig = PretrainConfig(), split=None) -> CriticPretrainResult:
    """Regress every critic ``Q(s, a)`` onto standardised discounted returns."""
    rng = np.random.default_rng(config.seed)
    train, val = split or split_dataset(dataset, rng, config.split, config.discount)
    y_train, mean, std = normalize_returns(train["ret"]) if len(train["ret"]) > 1 else \
        (np.zeros_like(train["ret"]), float(train["ret"].mean()), RETURN_STD_FLOOR)
    y_val, _, _ = normalize_returns(val["ret"], mean, std)
    x_train = np.concatenate([train["obs"], train["act"]], axis=1)
    x_val = np.concatenate([val["obs"], val["act"]], axis=1)
    data = {"x": x_train, "y": y_train}

    def loss_fn(p, b):
        return mse_loss(p, b["x"], b["y"])

    fits = []
    for i, q in enumerate(critics):
        opt = AdamState.zeros(q)
        shuffle = np.random.default_rng([config.seed, 2, i])
        fit = fit_early_stopping(
            q,
            lambda p, _: _minibatch_epoch(p, data, loss_fn, opt, config.critic_lr, config.batch_size, shuffle),
            lambda p: mse_loss(p, x_val, y_val, grad=False)[0],
            config.max_epochs, config.patience)
        if config.denormalize_critic:
            W, b = q.layers[-1]
            W *= std
            b *= std
            b += mean
        log.info("critic %d: best epoch %d of %d, val MSE %.4g", i, fit.best_epoch,
                 fit.stop_epoch, fit.best_val_loss)
        fits.append(fit)
    return CriticPretrainResult(fits, mean, std)


def pretrain_agent(agent, dataset: ExpertDataset, config: PretrainConfig = PretrainConfig()):
    """Actor then critics, with target critics reset to the pretrained critics.

    An empty dataset leaves the agent untouched and returns None.
    """
    if len(dataset) == 0 or dataset.n_pairs == 0:
        return None
    split = split_dataset(dataset, np.random.default_rng(config.seed), config.split, config.discount)
    actor_fit = bc_pretrain_actor(agent.actor, dataset, config, agent.squash, split=split)
    critic = pretrain_critic([agent.q1, agent.q2], dataset, config, split=split)
    agent.q1_target.assign(agent.q1)
    agent.q2_target.assign(agent.q2)
    agent.reset_optimizers()
    return actor_fit, critic
