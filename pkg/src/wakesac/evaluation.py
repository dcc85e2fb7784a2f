"""Baseline controllers, the evaluation grid, aggregate metrics and report files."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import EnvConfig, EpisodeSpec, WindFarmEnv, denormalize_obs, greedy_action, tracking_action
from .nn import MlpParams, UNIT_SQUASH, SquashConfig, deterministic_action, mlp_forward, sample_squashed
from .nn import GaussianPolicyOutput
from .turbulence import TurbulenceBox
from .util import circular_mean_deg
from .wake import (DEFAULT_WAKE, FarmLayout, InflowCondition, WakeModel, flow_field,
                   rotate_to_wind_frame)
from .yaw_opt import YawLut, lut_lookup

EVAL_DIRECTIONS = tuple(range(255, 290, 5))
EVAL_SPEEDS = (8.0, 10.0, 12.0, 13.0)
N_EVAL_BOXES = 6
T_EVAL = 3600.0

CASE_COLUMNS = ("case_id", "controller", "size", "step", "wind_direction", "wind_speed",
                "box", "seed", "gain_pct", "mean_power_agent", "mean_power_baseline")


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------

def polyak_filter(prev, x, rho: float = 0.05):
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    return prev + rho * (x - prev)  # exact fixed point when x == prev


def polyak_filter_direction(prev_deg: float, x_deg: float, rho: float = 0.05) -> float:
    """Polyak update on the unit circle; returns degrees in [0, 360)."""
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    a, b = math.radians(prev_deg), math.radians(x_deg)
    s = (1.0 - rho) * math.sin(a) + rho * math.sin(b)
    c = (1.0 - rho) * math.cos(a) + rho * math.cos(b)
    return math.degrees(math.atan2(s, c)) % 360.0


class Controller:
    """Maps observations to actions; ``reset`` is called at the start of each case."""

    name = "controller"

    def reset(self, env: WindFarmEnv, case: "EvalCase"):
        self.config = env.config

    def act(self, obs: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class GreedyController(Controller):
    name = "greedy"

    def act(self, obs):
        yaw = denormalize_obs(obs, self.config)[:, 2]
        return greedy_action(yaw, self.config.max_yaw_step)


class LutController(Controller):
    """Filters the upstream turbine's local wind and tracks the LUT yaw targets."""

    name = "lut"

    def __init__(self, lut: YawLut, rho: float = 0.05):
        if not 0 < rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        self.lut = lut
        self.rho = rho

    def reset(self, env, case):
        super().reset(env, case)
        self.positions = env.layout.positions
        self.ws_hat = self.wd_hat = None

    def upstream(self, wd: float) -> int:
        return int(np.argmin(rotate_to_wind_frame(self.positions, wd)[:, 0]))

    def act(self, obs):
        feats = denormalize_obs(obs, self.config)
        if self.ws_hat is None:
            i = self.upstream(float(circular_mean_deg(feats[:, 1])))
            self.ws_hat, self.wd_hat = float(feats[i, 0]), float(feats[i, 1]) % 360.0
        else:
            i = self.upstream(self.wd_hat)
            self.ws_hat = polyak_filter(self.ws_hat, float(feats[i, 0]), self.rho)
            self.wd_hat = polyak_filter_direction(self.wd_hat, float(feats[i, 1]), self.rho)
        self.target = lut_lookup(self.lut, self.wd_hat, self.ws_hat)
        return tracking_action(self.target, feats[:, 2], self.config.max_yaw_step)


class SacController(Controller):
    """Runs a policy network, either at its mean or by sampling.

    Sampling uses a generator seeded from the case, so results do not depend
    on evaluation order.
    """

    name = "sac"

    def __init__(self, actor: MlpParams, deterministic: bool = False,
                 squash: SquashConfig = UNIT_SQUASH):
        self.actor = actor
        self.deterministic = deterministic
        self.squash = squash

    def reset(self, env, case):
        super().reset(env, case)
        self.rng = np.random.default_rng(case.entropy())

    def act(self, obs):
        raw, _ = mlp_forward(self.actor, obs)
        out = GaussianPolicyOutput.from_raw(raw)
        if self.deterministic:
            return deterministic_action(out, self.squash)
        return sample_squashed(out, self.squash, self.rng).action


# ---------------------------------------------------------------------------
# Cases and the grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalCase:
    wind_direction: float
    wind_speed: float
    box: int
    seed: int = 0

    @property
    def case_id(self) -> str:
        return f"wd{self.wind_direction:g}_ws{self.wind_speed:g}_b{self.box}_s{self.seed}"

    def entropy(self) -> list[int]:
        return [self.seed, self.box, int(round(self.wind_direction * 1000)),
                int(round(self.wind_speed * 1000))]


def make_grid(seeds: Sequence[int] = (0,), directions=EVAL_DIRECTIONS, speeds=EVAL_SPEEDS,
              boxes=range(N_EVAL_BOXES)) -> list[EvalCase]:
    return [EvalCase(float(wd), float(ws), int(b), int(s))
            for s, wd, ws, b in product(seeds, directions, speeds, boxes)]


@dataclass
class CaseResult:
    case: EvalCase
    gain_pct: float
    mean_power_agent: float
    mean_power_baseline: float
    controller: str = ""
    size: str = ""
    step: int = 0
    series: dict | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {"case_id": self.case.case_id, "controller": self.controller, "size": self.size,
                "step": self.step, "wind_direction": self.case.wind_direction,
                "wind_speed": self.case.wind_speed, "box": self.case.box, "seed": self.case.seed,
                "gain_pct": self.gain_pct, "mean_power_agent": self.mean_power_agent,
                "mean_power_baseline": self.mean_power_baseline}


@dataclass
class EvalReport:
    results: list[CaseResult] = field(default_factory=list)
    failures: list[tuple[EvalCase, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.results)

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.results.extend(other.results)
        self.failures.extend(other.failures)
        return self


def run_case(controller: Controller, case: EvalCase, boxes: Sequence[TurbulenceBox],
             layout: FarmLayout | None = None, config: EnvConfig | None = None,
             model: WakeModel = DEFAULT_WAKE, horizon_s: float = T_EVAL,
             turbulence_intensity: float = 0.05, record_series: bool = False) -> CaseResult:
    """Run one evaluation episode from zero yaw and compare against the shadow greedy farm."""
    config = config or EnvConfig()
    if config.horizon_s != horizon_s:
        config = EnvConfig(**{**config.to_dict(), "horizon_s": horizon_s})
    env = WindFarmEnv(boxes, layout, config, model)
    n = env.layout.n_turbines
    spec = EpisodeSpec(InflowCondition(case.wind_speed, case.wind_direction, turbulence_intensity),
                       (0.0,) * n, case.box, case.seed)
    obs = env.reset(spec)
    controller.reset(env, case)
    pa, pb, yaws = [], [], []
    done = False
    while not done:
        obs, _, done, info = env.step(controller.act(obs))
        pa.append(info["power_agent"].sum())
        pb.append(info["power_baseline"].sum())
        yaws.append(info["yaw"])
    ma, mb = float(np.mean(pa)), float(np.mean(pb))
    series = None
    if record_series:
        series = {"time": config.dt_agent * np.arange(1, len(pa) + 1), "power_agent": np.array(pa),
                  "power_baseline": np.array(pb), "yaw": np.array(yaws)}
    return CaseResult(case, (ma / mb - 1.0) * 100.0, ma, mb, controller.name, series=series)


def _run_one(args):
    controller, case, kwargs = args
    try:
        return run_case(controller, case, **kwargs), None
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed
        return None, f"{type(exc).__name__}: {exc}"


def run_grid(controller: Controller, cases: Sequence[EvalCase], boxes: Sequence[TurbulenceBox],
             workers: int = 1, size: str = "", step: int = 0, **kwargs) -> EvalReport:
    """Evaluate every case; failures are collected rather than raised."""
    jobs = [(controller, c, {"boxes": boxes, **kwargs}) for c in cases]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(_run_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        outcomes = [_run_one(j) for j in jobs]
    report = EvalReport()
    for case, (res, err) in zip(cases, outcomes):
        if err is not None:
            report.failures.append((case, err))
            continue
        res.size, res.step = size, step
        report.results.append(res)
    return report


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _group_mean(results, key) -> dict:
    groups: dict = {}
    for r in results:
        groups.setdefault(key(r), []).append(r.gain_pct)
    return {k: float(np.mean(v)) for k, v in sorted(groups.items())}


def aggregate_mean_gain(report: EvalReport) -> dict:
    """Unweighted mean of per-case gains, plus breakdowns.

    ``ratio_gain_pct`` is the alternative reading: ratio of summed mean powers.
    """
    res = report.results
    if not res:
        raise ValueError("cannot aggregate an empty report")
    gains = np.array([r.gain_pct for r in res])
    pa = sum(r.mean_power_agent for r in res)
    pb = sum(r.mean_power_baseline for r in res)
    return {
        "overall_gain_pct": float(gains.mean()),
        "ratio_gain_pct": float((pa / pb - 1.0) * 100.0),
        "by_speed": {f"{k:g}": v for k, v in _group_mean(res, lambda r: r.case.wind_speed).items()},
        "by_direction": {f"{k:g}": v for k, v in
                         _group_mean(res, lambda r: r.case.wind_direction).items()},
        "by_snapshot": {f"{s}/{t}": v for (s, t), v in
                        _group_mean(res, lambda r: (r.size, r.step)).items()},
        "n_cases": len(res),
    }


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, columns, rows, config_hash: str | None):
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _stats_rows(results, key, name):
    groups: dict = {}
    for r in results:
        groups.setdefault(key(r), []).append(r.gain_pct)
    rows = []
    for k, v in sorted(groups.items()):
        q = np.percentile(v, [0, 25, 50, 75, 100])
        rows.append({name: k, "n": len(v), "mean": float(np.mean(v)), "std": float(np.std(v)),
                     "min": q[0], "q25": q[1], "median": q[2], "q75": q[3], "max": q[4]})
    return rows


STATS_COLUMNS = ("n", "mean", "std", "min", "q25", "median", "q75", "max")


def emit_report(report: EvalReport, out_dir, config_hash: str | None = None,
                write_series: bool = False) -> dict[str, Path]:
    """Write the per-case CSV, aggregate JSON, heatmap and distribution CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = report.results
    paths = {name: out / name for name in
             ("cases.csv", "aggregate.json", "heatmap.csv", "by_speed.csv", "by_direction.csv")}

    _write_csv(paths["cases.csv"], CASE_COLUMNS, [r.row() for r in res], config_hash)

    agg = aggregate_mean_gain(report) if res else {
        "overall_gain_pct": None, "ratio_gain_pct": None, "by_speed": {}, "by_direction": {},
        "by_snapshot": {}, "n_cases": 0}
    agg["config_hash"] = config_hash
    agg["failures"] = [{"case_id": c.case_id, "error": e} for c, e in report.failures]
    paths["aggregate.json"].write_text(json.dumps(agg, indent=2))

    sizes = sorted({r.size for r in res})
    steps = sorted({r.step for r in res})
    cells = _group_mean(res, lambda r: (r.size, r.step))
    rows = [{"size": s, **{str(t): cells.get((s, t), float("nan")) for t in steps}} for s in sizes]
    _write_csv(paths["heatmap.csv"], ["size"] + [str(t) for t in steps], rows, config_hash)

    _write_csv(paths["by_speed.csv"], ("wind_speed",) + STATS_COLUMNS,
               _stats_rows(res, lambda r: r.case.wind_speed, "wind_speed"), config_hash)
    _write_csv(paths["by_direction.csv"], ("wind_direction",) + STATS_COLUMNS,
               _stats_rows(res, lambda r: r.case.wind_direction, "wind_direction"), config_hash)

    if write_series:
        sdir = out / "series"
        sdir.mkdir(exist_ok=True)
        for r in res:
            if r.series is None:
                continue
            s = r.series
            n_t = s["yaw"].shape[1]
            cols = ["time", "power_agent", "power_baseline"] + [f"yaw_{i}" for i in range(n_t)]
            rows = [dict(zip(cols, [t, a, b, *y])) for t, a, b, y in
                    zip(s["time"], s["power_agent"], s["power_baseline"], s["yaw"])]
            _write_csv(sdir / f"{r.controller}_{r.size}_{r.step}_{r.case.case_id}.csv",
                       cols, rows, config_hash)
    return paths


def load_cases(path) -> EvalReport:
    """Rebuild a report (without series) from a per-case CSV."""
    report = EvalReport()
    for row in _read_csv(Path(path)):
        case = EvalCase(float(row["wind_direction"]), float(row["wind_speed"]),
                        int(row["box"]), int(row["seed"]))
        report.results.append(CaseResult(case, float(row["gain_pct"]),
                                         float(row["mean_power_agent"]),
                                         float(row["mean_power_baseline"]),
                                         row["controller"], row["size"], int(row["step"])))
    return report


def emit_flow_field(path, layout: FarmLayout, inflow: InflowCondition, yaws,
                    nx: int = 120, ny: int = 60, model: WakeModel = DEFAULT_WAKE,
                    config_hash: str | None = None):
    """Hub-height speed on a regular grid around the farm, long-form CSV (x, y, u)."""
    D = layout.spec.rotor_diameter
    lo = layout.positions.min(axis=0) - 3 * D
    hi = layout.positions.max(axis=0) + 3 * D
    x = np.linspace(lo[0], hi[0], nx)
    y = np.linspace(lo[1], hi[1], ny)
    u = flow_field(layout, inflow, yaws, x, y, model)
    X, Y = np.meshgrid(x, y, indexing="xy")
    rows = [{"x": a, "y": b, "u": c} for a, b, c in zip(X.ravel(), Y.ravel(), np.ravel(u))]
    _write_csv(Path(path), ("x", "y", "u"), rows, config_hash)
