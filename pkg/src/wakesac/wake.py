"""Steady-state analytical wake model for small wind farms.

Gaussian velocity deficit, linear kinematic yaw deflection, root-sum-square
superposition, all evaluated at the hub point of each rotor.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

RHO_AIR = 1.225
BETZ_CP = 16.0 / 27.0


class InvalidThrustWarning(RuntimeWarning):
    """Near-wake region where the Gaussian deficit has no real solution."""


# ---------------------------------------------------------------------------
# Turbine description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TabulatedCurve:
    """Piecewise-linear curve, clamped outside the tabulated range."""

    ws: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.ws) != len(self.values) or len(self.ws) < 1:
            raise ValueError("curve tables need matching, non-empty columns")
        if any(b <= a for a, b in zip(self.ws, self.ws[1:])):
            raise ValueError("curve wind speeds must be strictly increasing")

    @classmethod
    def from_pairs(cls, pairs):
        pairs = sorted((float(a), float(b)) for a, b in pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    def __call__(self, u):
        return np.interp(u, self.ws, self.values)

    def to_pairs(self):
        return [[a, b] for a, b in zip(self.ws, self.values)]


@dataclass(frozen=True)
class Region2Curve:
    """Constant below rated speed; optionally decays as (u_rated/u)^2 above it.

    Stand-in for a 10 MW reference rotor: region II at constant Cp/Ct,
    region III with thrust shedding.
    """

    value: float
    rated_ws: float = 11.4
    decay_above_rated: bool = False

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if not self.decay_above_rated:
            out = np.full_like(u, self.value)
        else:
            safe = np.maximum(u, self.rated_ws)
            out = np.where(u < self.rated_ws, self.value,
                           self.value * (self.rated_ws / safe) ** 2)
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class TurbineSpec:
    rotor_diameter: float = 178.3
    hub_height: float = 119.0
    rated_power: float = 10.0e6
    cp_curve: Callable = field(default=Region2Curve(0.48))
    ct_curve: Callable = field(default=Region2Curve(0.80, decay_above_rated=True))
    power_yaw_exponent: float = 1.88

    def __post_init__(self):
        if self.rotor_diameter <= 0:
            raise ValueError("rotor_diameter must be positive")
        if self.rated_power <= 0:
            raise ValueError("rated_power must be positive")
        probe = np.linspace(0.0, 40.0, 401)
        cp = np.asarray(self.cp_curve(probe))
        ct = np.asarray(self.ct_curve(probe))
        if np.any(cp < 0) or np.any(cp > BETZ_CP + 1e-12):
            raise ValueError("Cp must lie in [0, 16/27]")
        if np.any(ct < 0) or np.any(ct >= 1):
            raise ValueError("Ct must lie in [0, 1)")

    @property
    def rotor_area(self) -> float:
        return math.pi * (0.5 * self.rotor_diameter) ** 2

    def cp(self, u):
        return self.cp_curve(u)

    def ct(self, u):
        return self.ct_curve(u)

    @classmethod
    def from_dict(cls, d: dict) -> "TurbineSpec":
        required = {"rotor_diameter", "hub_height", "rated_power", "cp_table", "ct_table"}
        missing = required - set(d)
        if missing:
            raise ValueError(f"turbine spec missing keys: {sorted(missing)}")
        unknown = set(d) - required - {"power_yaw_exponent"}
        if unknown:
            raise ValueError(f"unknown turbine spec keys: {sorted(unknown)}")
        return cls(
            rotor_diameter=float(d["rotor_diameter"]),
            hub_height=float(d["hub_height"]),
            rated_power=float(d["rated_power"]),
            cp_curve=TabulatedCurve.from_pairs(d["cp_table"]),
            ct_curve=TabulatedCurve.from_pairs(d["ct_table"]),
            power_yaw_exponent=float(d.get("power_yaw_exponent", 1.88)),
        )

    @classmethod
    def from_json(cls, path) -> "TurbineSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class FarmLayout:
    positions: np.ndarray
    spec: TurbineSpec = field(default_factory=TurbineSpec)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "positions", pos)
        if len({tuple(p) for p in pos.tolist()}) != len(pos):
            raise ValueError("turbine positions must be distinct")

    @classmethod
    def grid(cls, nx: int = 2, ny: int = 2, spacing_d: float = 5.0,
             spec: TurbineSpec | None = None) -> "FarmLayout":
        """Rectangular grid, ``nx`` turbines along x and ``ny`` along y.

        Turbines are numbered row by row (x fastest), so the default 2x2 farm is
        ``[(0, 0), (5D, 0), (0, 5D), (5D, 5D)]``.
        """
        spec = spec or TurbineSpec()
        s = spacing_d * spec.rotor_diameter
        pos = [(i * s, j * s) for j in range(ny) for i in range(nx)]
        return cls(np.array(pos), spec)

    @property
    def n_turbines(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class InflowCondition:
    wind_speed: float
    wind_direction: float
    turbulence_intensity: float = 0.05

    def __post_init__(self):
        if not self.wind_speed > 0:
            raise ValueError("wind_speed must be positive")
        if not 0 <= self.wind_direction < 360:
            raise ValueError("wind_direction must lie in [0, 360)")
        if self.turbulence_intensity < 0:
            raise ValueError("turbulence_intensity must be non-negative")


@dataclass(frozen=True)
class WakeModel:
    """Wake expansion ``sigma/D = k*x/D + eps``.

    With ``k=None`` the expansion rate follows the local turbulence intensity,
    ``k = 0.38*I + 0.004``.
    """

    k: float | None = 0.05
    eps: float = 0.25

    def expansion(self, ti: float) -> float:
        return 0.38 * ti + 0.004 if self.k is None else self.k


DEFAULT_WAKE = WakeModel()


@dataclass
class SteadyFlowResult:
    effective_ws: np.ndarray
    power: np.ndarray

    @property
    def total_power(self) -> float:
        return float(np.sum(self.power))


# ---------------------------------------------------------------------------
# Elementary closed forms
# ---------------------------------------------------------------------------

def rotate_to_wind_frame(layout: FarmLayout | np.ndarray, wind_direction: float) -> np.ndarray:
    """Return (downstream, crosswind) coordinates for each turbine.

    Meteorological convention: ``wind_direction`` is where the wind comes
    from, clockwise from north, with x east and y north. 270 deg blows along +x
    and the crosswind axis is then +y.
    """
    pos = layout.positions if isinstance(layout, FarmLayout) else np.asarray(layout, float)
    th = math.radians(wind_direction)
    down = np.array([-math.sin(th), -math.cos(th)])
    cross = np.array([math.cos(th), -math.sin(th)])
    return np.column_stack([pos @ down, pos @ cross])


def _deficit(x, r, ct, sigma_d, diameter):
    """Vectorised Gaussian deficit; returns (deficit, invalid_mask)."""
    x = np.asarray(x, float)
    sigma_d = np.where(x > 0, sigma_d, 1.0)
    arg = 1.0 - np.asarray(ct, float) / (8.0 * sigma_d**2)
    invalid = (arg < 0) & (x > 0)
    centre = np.where(arg < 0, 1.0, 1.0 - np.sqrt(np.maximum(arg, 0.0)))
    sigma = sigma_d * diameter
    shape = np.exp(-np.asarray(r, float) ** 2 / (2.0 * sigma**2))
    return np.where(x > 0, centre * shape, 0.0), invalid


def wake_deficit(x: float, r: float, ct: float, ti: float, spec: TurbineSpec,
                 model: WakeModel = DEFAULT_WAKE) -> float:
    """Fractional velocity deficit at downstream distance ``x``, crosswind ``r``.

    Zero at or upstream of the rotor. In the near wake where
    ``1 - ct/(8 (sigma/D)^2) < 0`` the centreline deficit is capped at 1 and an
    :class:`InvalidThrustWarning` is issued.
    """
    if not 0 <= ct < 1:
        raise ValueError("ct must lie in [0, 1)")
    if x <= 0 or ct == 0:
        return 0.0
    D = spec.rotor_diameter
    sigma_d = model.expansion(ti) * x / D + model.eps
    d, invalid = _deficit(x, r, ct, sigma_d, D)
    if invalid:
        warnings.warn("near-wake thrust condition violated; deficit capped at 1",
                      InvalidThrustWarning, stacklevel=2)
    return float(d)


def wake_deflection(x, ct, yaw_deg):
    """Crosswind offset of the wake centre; positive yaw deflects toward +crosswind."""
    g = np.radians(yaw_deg)
    out = np.maximum(x, 0.0) * 0.5 * ct * np.sin(g) * np.cos(g) ** 2
    return out if np.ndim(out) else float(out)


def turbine_power(u_eff, yaw_deg, spec: TurbineSpec):
    """Electrical power in W, capped at rated, with ``cos^p`` loss under yaw."""
    u = np.maximum(np.asarray(u_eff, float), 0.0)
    cos_g = np.maximum(np.cos(np.radians(yaw_deg)), 0.0)
    p = 0.5 * RHO_AIR * spec.rotor_area * spec.cp(u) * u**3 * cos_g**spec.power_yaw_exponent
    p = np.minimum(p, spec.rated_power)
    return p if np.ndim(p) else float(p)


# ---------------------------------------------------------------------------
# Farm-level evaluation
# ---------------------------------------------------------------------------

def downstream_order(coords: np.ndarray) -> np.ndarray:
    """Turbine indices sorted by downstream coordinate, ties by index."""
    return np.lexsort((np.arange(len(coords)), coords[:, 0]))


def effective_wind_speeds(layout: FarmLayout, inflow: InflowCondition, yaws,
                          model: WakeModel = DEFAULT_WAKE) -> np.ndarray:
    """Rotor-effective speeds for a yaw vector (n,) or a batch of them (B, n)."""
    yaws = np.asarray(yaws, float)
    n = layout.n_turbines
    if yaws.shape[-1:] != (n,) or yaws.ndim > 2:
        raise ValueError(f"expected {n} yaw angles, got shape {yaws.shape}")
    single = yaws.ndim == 1
    Y = yaws[None] if single else yaws
    spec = layout.spec
    D = spec.rotor_diameter
    U = float(inflow.wind_speed)
    k = model.expansion(inflow.turbulence_intensity)
    xy = rotate_to_wind_frame(layout, inflow.wind_direction)
    order = downstream_order(xy)

    ws = np.full(Y.shape, U)
    ct = np.zeros(Y.shape)
    done: list[int] = []
    for i in order:
        if done:
            src = np.array(done)
            dx = xy[i, 0] - xy[src, 0]
            centre = xy[src, 1] + wake_deflection(dx, ct[:, src], Y[:, src])
            d, _ = _deficit(dx, xy[i, 1] - centre, ct[:, src], k * dx / D + model.eps, D)
            ws[:, i] = np.maximum(U * (1.0 - np.sqrt(np.sum(d**2, axis=1))), 0.0)
        ct[:, i] = spec.ct(ws[:, i])
        done.append(i)
    return ws[0] if single else ws


def farm_power(layout: FarmLayout, inflow: InflowCondition, yaws: Sequence[float],
               model: WakeModel = DEFAULT_WAKE) -> SteadyFlowResult:
    ws = effective_wind_speeds(layout, inflow, yaws, model)
    return SteadyFlowResult(ws, np.asarray(turbine_power(ws, np.asarray(yaws, float), layout.spec)))


def flow_field(layout: FarmLayout, inflow: InflowCondition, yaws: Sequence[float],
               x: np.ndarray, y: np.ndarray, model: WakeModel = DEFAULT_WAKE) -> np.ndarray:
    """Hub-height wind speed on the grid ``x`` (columns) by ``y`` (rows), world frame."""
    yaws = np.asarray(yaws, float)
    ws = effective_wind_speeds(layout, inflow, yaws, model)
    ct = np.asarray(layout.spec.ct(ws), float)
    D = layout.spec.rotor_diameter
    k = model.expansion(inflow.turbulence_intensity)
    X, Y = np.meshgrid(np.asarray(x, float), np.asarray(y, float))
    pts = rotate_to_wind_frame(np.column_stack([X.ravel(), Y.ravel()]), inflow.wind_direction)
    xy = rotate_to_wind_frame(layout, inflow.wind_direction)
    dx = pts[:, None, 0] - xy[None, :, 0]
    centre = xy[None, :, 1] + wake_deflection(dx, ct[None, :], yaws[None, :])
    d, _ = _deficit(dx, pts[:, None, 1] - centre, ct[None, :], k * dx / D + model.eps, D)
    u = inflow.wind_speed * (1.0 - np.sqrt(np.sum(d**2, axis=1)))
    return np.maximum(u, 0.0).reshape(X.shape)
