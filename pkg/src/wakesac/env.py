"""Quasi-dynamic wind-farm environment.

Each turbine sees the free stream plus its own turbulence perturbation minus
the deficits of upstream wakes. A wake reaching turbine i from turbine j was
emitted ``x_ij / U`` seconds earlier, so it carries the yaw and thrust that j
had at that time and a sideways meander drift picked up on the way. The
reward compares the agent's farm against a shadow farm, driven by the same
turbulence, in which every turbine steers back to zero yaw at the rate limit.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .turbulence import TurbulenceBox, generate_turbulence_box
from .util import circular_mean_deg
from .wake import (DEFAULT_WAKE, FarmLayout, InflowCondition, WakeModel, _deficit,
                   effective_wind_speeds, rotate_to_wind_frame, turbine_power, wake_deflection)

N_FEATURES = 6
N_TRAIN_BOXES = 10
DOWNSTREAM_TOL = 1e-6  # m


@dataclass(frozen=True)
class EnvConfig:
    dt_sim: float = 5.0
    dt_agent: float = 10.0
    flow_throughs: float = 20.0
    yaw_rate_max: float = 0.5
    avg_window: int = 25
    ws_bounds: tuple[float, float] = (0.0, 30.0)
    wd_bounds: tuple[float, float] = (240.0, 300.0)
    yaw_bounds: tuple[float, float] = (-40.0, 40.0)
    margin_upstream_d: float = 2.0
    margin_downstream_d: float = 2.0
    horizon_s: float | None = None  # fixed episode length instead of the flow-through rule

    def __post_init__(self):
        ratio = self.dt_agent / self.dt_sim
        if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt_agent must be an integer multiple of dt_sim")
        if self.yaw_rate_max <= 0:
            raise ValueError("yaw_rate_max must be positive")
        if self.avg_window < 1:
            raise ValueError("avg_window must be >= 1")

    @property
    def substeps(self) -> int:
        return int(round(self.dt_agent / self.dt_sim))

    @property
    def max_yaw_step(self) -> float:
        return self.yaw_rate_max * self.dt_agent

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpisodeSpec:
    inflow: InflowCondition
    initial_yaws: tuple[float, ...]
    turbulence_box_id: int = 0
    rng_seed: int = 0


def sample_episode(rng: np.random.Generator, n_turbines: int = 4,
                   n_boxes: int = N_TRAIN_BOXES) -> EpisodeSpec:
    ws = rng.uniform(8.0, 15.0)
    wd = rng.uniform(255.0, 285.0)
    yaws = rng.uniform(-15.0, 15.0, n_turbines)
    box = int(rng.integers(n_boxes))
    seed = int(rng.integers(2**31))
    return EpisodeSpec(InflowCondition(ws, wd, 0.05), tuple(float(y) for y in yaws), box, seed)


def make_library(seeds: Sequence[int], duration: float = 7200.0, n_turbines: int = 4,
                 dt: float = 5.0, **kwargs) -> list[TurbulenceBox]:
    return [generate_turbulence_box(duration, s, n_turbines, dt, **kwargs) for s in seeds]


# ---------------------------------------------------------------------------
# Observation scaling
# ---------------------------------------------------------------------------

def _feature_bounds(cfg: EnvConfig) -> np.ndarray:
    b = [cfg.ws_bounds, cfg.wd_bounds, cfg.yaw_bounds]
    return np.array(b + b, float)  # (6, 2): instantaneous then window means


def normalize_obs(raw: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    """Map per-turbine features (n, 6) to a flat vector in [-1, 1]."""
    bounds = _feature_bounds(cfg)
    lo, hi = bounds[:, 0], bounds[:, 1]
    z = 2.0 * (np.asarray(raw, float) - lo) / (hi - lo) - 1.0
    return np.clip(z, -1.0, 1.0).ravel()


def denormalize_obs(obs: np.ndarray, cfg: EnvConfig) -> np.ndarray:
    bounds = _feature_bounds(cfg)
    lo, hi = bounds[:, 0], bounds[:, 1]
    z = np.asarray(obs, float).reshape(-1, N_FEATURES)
    return lo + (z + 1.0) * (hi - lo) / 2.0


def tracking_action(target, yaws, max_step: float) -> np.ndarray:
    """Rate-limited incremental action steering ``yaws`` toward ``target``."""
    return np.clip((np.asarray(target, float) - np.asarray(yaws, float)) / max_step, -1.0, 1.0)


def greedy_action(yaws, max_step: float) -> np.ndarray:
    return tracking_action(0.0, yaws, max_step)


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass
class _Geometry:
    """Wake paths (source j -> receiver i with j strictly upstream) for one inflow."""

    dst: np.ndarray
    src: np.ndarray
    dx: np.ndarray
    dc: np.ndarray
    travel_time: np.ndarray
    lag: np.ndarray  # whole sub-steps between emission and arrival
    sigma_d: np.ndarray


class _FarmSim:
    """One farm advancing through time with a ring buffer of wake emissions."""

    def __init__(self, env: "WindFarmEnv", yaws: np.ndarray):
        self.env = env
        n = env.layout.n_turbines
        self.yaw = yaws.copy()
        steady = effective_wind_speeds(env.layout, env.inflow, self.yaw, env.model)
        ct0 = np.asarray(env.layout.spec.ct(steady), float)
        rows = env._offset + env._total_substeps + 1
        self.hist_yaw = np.full((rows, n), np.nan)
        self.hist_ct = np.full((rows, n), np.nan)
        self.hist_yaw[: env._offset + 1] = self.yaw
        self.hist_ct[: env._offset + 1] = ct0
        self.ws, self.wd, self.power = self._flow(0)

    def _flow(self, k: int):
        env = self.env
        g = env._geom
        U = env.inflow.wind_speed
        box_k = k % env._speed.shape[0]
        ws = U + env._speed[box_k]
        if len(g.dst):
            e = k - g.lag
            rows = e + env._offset
            yaw_e = self.hist_yaw[rows, g.src]
            ct_e = self.hist_ct[rows, g.src]
            meander = env._lateral[np.maximum(e, 0) % env._lateral.shape[0], g.src] * g.travel_time
            centre = wake_deflection(g.dx, ct_e, yaw_e) + meander
            d, _ = _deficit(g.dx, g.dc - centre, ct_e, g.sigma_d, env.layout.spec.rotor_diameter)
            sq = np.zeros(len(ws))
            np.add.at(sq, g.dst, d * d)
            ws = ws - U * np.sqrt(sq)
        ws = np.maximum(ws, 0.0)
        wd = env.inflow.wind_direction + env._direction[box_k]
        power = np.asarray(turbine_power(ws, self.yaw, env.layout.spec), float)
        return ws, wd, power

    def advance(self, k: int, yaw: np.ndarray):
        """Move to sub-step ``k`` with the given yaw, then record the emission."""
        self.yaw = yaw
        self.ws, self.wd, self.power = self._flow(k)
        row = k + self.env._offset
        self.hist_yaw[row] = self.yaw
        self.hist_ct[row] = self.env.layout.spec.ct(self.ws)


class WindFarmEnv:
    """Gym-style episodic environment over a fixed farm layout.

    ``reset(spec)`` returns the first observation; ``step(action)`` returns
    ``(obs, reward, done, info)``. Actions are per-turbine yaw increments in
    [-1, 1], scaled by the per-step yaw limit.
    """

    def __init__(self, boxes: Sequence[TurbulenceBox], layout: FarmLayout | None = None,
                 config: EnvConfig = EnvConfig(), model: WakeModel = DEFAULT_WAKE):
        self.layout = layout or FarmLayout.grid()
        self.boxes = list(boxes)
        self.config = config
        self.model = model
        self._active = False
        self.spec: EpisodeSpec | None = None

    @property
    def obs_dim(self) -> int:
        return N_FEATURES * self.layout.n_turbines

    @property
    def action_dim(self) -> int:
        return self.layout.n_turbines

    def episode_length_s(self, inflow: InflowCondition) -> float:
        """Flow-through episode length ``flow_throughs * L / U``."""
        if self.config.horizon_s is not None:
            return float(self.config.horizon_s)
        return self.config.flow_throughs * self.domain_length(inflow.wind_direction) / inflow.wind_speed

    def domain_length(self, wind_direction: float) -> float:
        down = rotate_to_wind_frame(self.layout, wind_direction)[:, 0]
        D = self.layout.spec.rotor_diameter
        return float(np.ptp(down)) + (self.config.margin_upstream_d + self.config.margin_downstream_d) * D

    def n_agent_steps(self, inflow: InflowCondition) -> int:
        return int(math.ceil(self.episode_length_s(inflow) / self.config.dt_agent - 1e-9))

    # -- episode control ---------------------------------------------------

    def reset(self, spec: EpisodeSpec) -> np.ndarray:
        cfg = self.config
        if not 0 <= spec.turbulence_box_id < len(self.boxes):
            raise KeyError(f"unknown turbulence box {spec.turbulence_box_id}")
        yaws = np.asarray(spec.initial_yaws, float)
        if yaws.shape != (self.layout.n_turbines,):
            raise ValueError("initial_yaws must have one entry per turbine")
        self.spec = spec
        self.inflow = spec.inflow
        box = self.boxes[spec.turbulence_box_id]
        if box.n_turbines != self.layout.n_turbines:
            raise ValueError("turbulence box turbine count does not match the layout")
        if abs(box.dt - cfg.dt_sim) > 1e-12:
            raise ValueError("turbulence box time step differs from dt_sim")
        self._speed = box.speed(self.inflow)
        self._direction = box.direction()
        self._lateral = box.lateral_velocity(self.inflow)
        self._geom = self._geometry()
        self.n_steps = self.n_agent_steps(self.inflow)
        self._total_substeps = self.n_steps * cfg.substeps
        self._offset = int(self._geom.lag.max()) if len(self._geom.lag) else 0
        self.agent = _FarmSim(self, yaws)
        self.baseline = _FarmSim(self, yaws)
        self.t_step = 0
        self.time = 0.0
        w = cfg.avg_window
        self._win = [deque([v.copy()] * w, maxlen=w)
                     for v in (self.agent.ws, self.agent.wd, self.agent.yaw)]
        self._active = True
        return self._observe()

    def _geometry(self) -> _Geometry:
        xy = rotate_to_wind_frame(self.layout, self.inflow.wind_direction)
        n = len(xy)
        dst, src = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        dx = xy[dst, 0] - xy[src, 0]
        keep = dx > DOWNSTREAM_TOL  # side-by-side pairs carry rotation round-off
        dst, src, dx = dst[keep], src[keep], dx[keep]
        dc = xy[dst, 1] - xy[src, 1]
        tt = dx / self.inflow.wind_speed
        lag = np.maximum(np.ceil(tt / self.config.dt_sim - 1e-12), 1).astype(int)
        D = self.layout.spec.rotor_diameter
        k = self.model.expansion(self.inflow.turbulence_intensity)
        return _Geometry(dst, src, dx, dc, tt, lag, k * dx / D + self.model.eps)

    def _raw_features(self) -> np.ndarray:
        ws_w, wd_w, yaw_w = (np.array(w) for w in self._win)
        return np.column_stack([
            self.agent.ws, self.agent.wd, self.agent.yaw,
            ws_w.mean(axis=0), circular_mean_deg(wd_w, axis=0), yaw_w.mean(axis=0),
        ])

    def _observe(self) -> np.ndarray:
        raw = self._raw_features()
        raw[:, 1] = _unwrap_near(raw[:, 1], self.inflow.wind_direction)
        raw[:, 4] = _unwrap_near(raw[:, 4], self.inflow.wind_direction)
        return normalize_obs(raw, self.config)

    def step(self, action):
        if not self._active:
            raise RuntimeError("step() called on a finished or unreset episode")
        cfg = self.config
        a = np.asarray(action, float).reshape(-1)
        if a.shape != (self.layout.n_turbines,):
            raise ValueError("action must have one entry per turbine")
        clipped = bool(np.any(np.abs(a) > 1.0))
        a = np.clip(a, -1.0, 1.0)
        lo, hi = cfg.yaw_bounds
        step = cfg.max_yaw_step
        start_a, start_b = self.agent.yaw.copy(), self.baseline.yaw.copy()
        end_a = np.clip(start_a + a * step, lo, hi)
        end_b = np.clip(start_b + greedy_action(start_b, step) * step, lo, hi)

        m = cfg.substeps
        pa = np.zeros(self.layout.n_turbines)
        pb = np.zeros(self.layout.n_turbines)
        k0 = self.t_step * m
        for s in range(1, m + 1):
            if s == m:
                ya, yb = end_a, end_b
            else:
                ya = start_a + s / m * (end_a - start_a)
                yb = start_b + s / m * (end_b - start_b)
            self.agent.advance(k0 + s, ya)
            self.baseline.advance(k0 + s, yb)
            pa += self.agent.power
            pb += self.baseline.power
        pa /= m
        pb /= m
        reward = float(pa.sum() / pb.sum() - 1.0)

        self.t_step += 1
        self.time = self.t_step * cfg.dt_agent
        for w, v in zip(self._win, (self.agent.ws, self.agent.wd, self.agent.yaw)):
            w.append(v.copy())
        done = self.t_step >= self.n_steps
        self._active = not done
        info = {"clipped": clipped, "time": self.time, "power_agent": pa,
                "power_baseline": pb, "yaw": end_a.copy(), "yaw_baseline": end_b.copy()}
        return self._observe(), reward, done, info

    def instantaneous_farm_state(self):
        """Per-turbine (local wind speed, local direction, power) of the agent farm."""
        return self.agent.ws.copy(), self.agent.wd.copy(), self.agent.power.copy()


def _unwrap_near(angles, ref):
    """Express angles within +-180 deg of ``ref`` so normalisation sees no wrap."""
    return ref + (np.asarray(angles) - ref + 180.0) % 360.0 - 180.0
