"""Synthetic inflow turbulence: mean-reverting perturbation series per turbine.

A box is stored standardised (zero mean, unit variance per channel) so one
library serves every sampled inflow; physical amplitudes are applied when an
episode reads it.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .util import config_hash
from .wake import InflowCondition

SPEED, DIRECTION, LATERAL = 0, 1, 2


def ou_series(rng: np.random.Generator, n_steps: int, n_series: int, dt: float,
              correlation_time: float) -> np.ndarray:
    """Exact discretisation of a unit-variance Ornstein-Uhlenbeck process.

    Started from the stationary distribution; returns shape (n_steps, n_series).
    """
    phi = math.exp(-dt / correlation_time)
    innov = math.sqrt(1.0 - phi * phi)
    z = rng.standard_normal((n_steps, n_series))
    out = np.empty_like(z)
    out[0] = z[0]
    for k in range(1, n_steps):
        out[k] = phi * out[k - 1] + innov * z[k]
    return out


def _standardise(x: np.ndarray) -> np.ndarray:
    x = x - x.mean(axis=0)
    std = x.std(axis=0)
    return x / np.where(std > 0, std, 1.0)


@dataclass
class TurbulenceBox:
    seed: int
    dt: float
    unit: np.ndarray  # (n_steps, 3, n_turbines): speed, direction, lateral velocity
    correlation_time: float = 60.0
    direction_std: float = 3.0
    meander_scale: float = 1.0

    @property
    def n_steps(self) -> int:
        return self.unit.shape[0]

    @property
    def n_turbines(self) -> int:
        return self.unit.shape[2]

    @property
    def duration(self) -> float:
        return (self.n_steps - 1) * self.dt

    def speed(self, inflow: InflowCondition) -> np.ndarray:
        """Wind-speed perturbation per turbine (m/s), std ``I * U``."""
        return inflow.turbulence_intensity * inflow.wind_speed * self.unit[:, SPEED]

    def direction(self) -> np.ndarray:
        """Wind-direction perturbation per turbine (deg)."""
        return self.direction_std * self.unit[:, DIRECTION]

    def lateral_velocity(self, inflow: InflowCondition) -> np.ndarray:
        """Crosswind velocity carried by each turbine's wake (m/s).

        A wake emitted at time t drifts ``v(t) * travel_time`` sideways before
        reaching a downstream rotor, which is the meander offset of that path.
        """
        return (self.meander_scale * inflow.turbulence_intensity * inflow.wind_speed
                * self.unit[:, LATERAL])

    def meander_offsets(self, inflow: InflowCondition, travel_time: float) -> np.ndarray:
        return self.lateral_velocity(inflow) * travel_time

    def header(self) -> dict:
        return {"seed": int(self.seed), "dt": self.dt, "n_steps": self.n_steps,
                "n_turbines": self.n_turbines, "correlation_time": self.correlation_time,
                "direction_std": self.direction_std, "meander_scale": self.meander_scale}

    def save(self, path):
        head = self.header()
        head["config_hash"] = config_hash(head)
        buf = io.BytesIO()
        np.savez(buf, unit=self.unit, header=np.array(json.dumps(head)))
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "TurbulenceBox":
        with np.load(path, allow_pickle=False) as data:
            head = json.loads(str(data["header"]))
            unit = data["unit"]
        stored = head.pop("config_hash")
        if config_hash(head) != stored:
            raise ValueError(f"{path}: turbulence box header hash mismatch")
        if unit.shape != (head["n_steps"], 3, head["n_turbines"]):
            raise ValueError(f"{path}: turbulence box shape mismatch")
        return cls(seed=head["seed"], dt=head["dt"], unit=unit,
                   correlation_time=head["correlation_time"],
                   direction_std=head["direction_std"], meander_scale=head["meander_scale"])


def generate_turbulence_box(duration: float, seed: int, n_turbines: int = 4, dt: float = 5.0,
                            correlation_time: float = 60.0, direction_std: float = 3.0,
                            meander_scale: float = 1.0) -> TurbulenceBox:
    if duration <= 0:
        raise ValueError("duration must be positive")
    n_steps = int(math.ceil(duration / dt)) + 1
    rng = np.random.default_rng(seed)
    raw = ou_series(rng, n_steps, 3 * n_turbines, dt, correlation_time)
    unit = _standardise(raw).reshape(n_steps, 3, n_turbines)
    return TurbulenceBox(int(seed), dt, unit, correlation_time, direction_std, meander_scale)
