"""Serial-refine yaw optimisation and yaw lookup tables."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .wake import (DEFAULT_WAKE, FarmLayout, InflowCondition, WakeModel, downstream_order,
                   effective_wind_speeds, farm_power, rotate_to_wind_frame,
                   turbine_power)


@dataclass(frozen=True)
class SerialRefineSettings:
    bounds: tuple[float, float] = (-30.0, 30.0)
    coarse_points: int = 13
    passes: int = 4

    def __post_init__(self):
        if self.coarse_points < 3:
            raise ValueError("coarse_points must be >= 3")
        if self.passes < 1:
            raise ValueError("passes must be >= 1")
        if not self.bounds[0] < self.bounds[1]:
            raise ValueError("bounds must be increasing")

    @property
    def final_spacing(self) -> float:
        span = self.bounds[1] - self.bounds[0]
        return span / 2 ** (self.passes - 1) / (self.coarse_points - 1)


DEFAULT_REFINE = SerialRefineSettings()


@dataclass
class YawSolution:
    yaws: np.ndarray
    total_power: float
    passes_used: int
    pass_power: list[float] = field(default_factory=list)


def serial_refine(layout: FarmLayout, inflow: InflowCondition,
                  settings: SerialRefineSettings = DEFAULT_REFINE,
                  model: WakeModel = DEFAULT_WAKE) -> YawSolution:
    """Greedy coordinate search over yaw, front to back, with shrinking grids.

    The first pass scans the full bounds; every later pass scans a window of
    half the previous width centred on the incumbent. A candidate replaces the
    incumbent only on strict improvement, so flat (above-rated) directions
    stay at zero yaw.
    """
    lo, hi = settings.bounds
    n = layout.n_turbines
    order = downstream_order(rotate_to_wind_frame(layout, inflow.wind_direction))
    yaws = np.zeros(n)
    best = farm_power(layout, inflow, yaws, model).total_power
    history = []
    span = hi - lo
    for p in range(settings.passes):
        for i in order:
            if p == 0:
                grid = np.linspace(lo, hi, settings.coarse_points)
            else:
                grid = yaws[i] + np.linspace(-span / 2, span / 2, settings.coarse_points)
            grid = grid[(grid != yaws[i]) & (grid >= lo) & (grid <= hi)]
            if not len(grid):
                continue
            cand = np.repeat(yaws[None], len(grid), axis=0)
            cand[:, i] = grid
            ws = effective_wind_speeds(layout, inflow, cand, model)
            power = np.sum(turbine_power(ws, cand, layout.spec), axis=1)
            # first maximum == what a sequential strict-improvement scan keeps
            j = int(np.argmax(power))
            if power[j] > best:
                best, yaws[i] = float(power[j]), grid[j]
        history.append(best)
        span /= 2
    return YawSolution(yaws, best, settings.passes, history)


def expert_yaw_targets(inflow: InflowCondition, layout: FarmLayout | None = None,
                       settings: SerialRefineSettings = DEFAULT_REFINE,
                       model: WakeModel = DEFAULT_WAKE) -> np.ndarray:
    """Steady-state optimal yaw vector for a perfectly known inflow."""
    layout = layout or FarmLayout.grid()
    return serial_refine(layout, inflow, settings, model).yaws


@dataclass
class YawLut:
    wd_axis: np.ndarray
    ws_axis: np.ndarray
    table: np.ndarray  # (n_wd, n_ws, n_turbines)

    def __post_init__(self):
        self.wd_axis = np.asarray(self.wd_axis, float)
        self.ws_axis = np.asarray(self.ws_axis, float)
        self.table = np.asarray(self.table, float)
        for ax in (self.wd_axis, self.ws_axis):
            if ax.ndim != 1 or len(ax) == 0 or np.any(np.diff(ax) <= 0):
                raise ValueError("LUT axes must be non-empty and strictly increasing")
        if self.table.shape[:2] != (len(self.wd_axis), len(self.ws_axis)):
            raise ValueError("LUT table shape does not match its axes")

    def to_json(self, path, meta: dict | None = None):
        doc = {**(meta or {}), "wd_axis": self.wd_axis.tolist(), "ws_axis": self.ws_axis.tolist(),
               "yaws": self.table.tolist()}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def from_json(cls, path) -> "YawLut":
        doc = json.loads(Path(path).read_text())
        return cls(doc["wd_axis"], doc["ws_axis"], doc["yaws"])


def _lut_node(args):
    layout, wd, ws, ti, settings, model = args
    return expert_yaw_targets(InflowCondition(ws, wd, ti), layout, settings, model)


def build_lut(layout: FarmLayout, wd_axis, ws_axis, ti: float = 0.05,
              settings: SerialRefineSettings = DEFAULT_REFINE, model: WakeModel = DEFAULT_WAKE,
              workers: int = 1) -> YawLut:
    wd_axis = np.asarray(wd_axis, float)
    ws_axis = np.asarray(ws_axis, float)
    jobs = [(layout, wd, ws, ti, settings, model) for wd in wd_axis for ws in ws_axis]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            nodes = list(pool.map(_lut_node, jobs))
    else:
        nodes = [_lut_node(j) for j in jobs]
    table = np.array(nodes).reshape(len(wd_axis), len(ws_axis), layout.n_turbines)
    return YawLut(wd_axis, ws_axis, table)


def _bracket(axis: np.ndarray, q: float):
    if len(axis) == 1 or q <= axis[0]:
        return 0, 0, 0.0
    if q >= axis[-1]:
        return len(axis) - 1, len(axis) - 1, 0.0
    j = int(np.searchsorted(axis, q, side="right")) - 1
    return j, j + 1, (q - axis[j]) / (axis[j + 1] - axis[j])


def lut_lookup(lut: YawLut, wd: float, ws: float) -> np.ndarray:
    """Bilinear interpolation in (direction, speed); queries clamp to the table edge."""
    i0, i1, u = _bracket(lut.wd_axis, wd)
    j0, j1, v = _bracket(lut.ws_axis, ws)
    t = lut.table
    return ((1 - u) * (1 - v) * t[i0, j0] + u * (1 - v) * t[i1, j0]
            + (1 - u) * v * t[i0, j1] + u * v * t[i1, j1])
