"""Run configuration: one JSON document, one section per module, no unknown keys."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .env import EnvConfig
from .evaluation import EVAL_DIRECTIONS, EVAL_SPEEDS, N_EVAL_BOXES
from .pretrain import DATASET_SIZES, PretrainConfig
from .sac import SacConfig
from .util import config_hash
from .wake import FarmLayout, TurbineSpec, WakeModel
from .yaw_opt import SerialRefineSettings


@dataclass(frozen=True)
class FarmSection:
    turbine: str | None = None   # path to a turbine JSON; None = built-in 10 MW reference
    nx: int = 2
    ny: int = 2
    spacing_d: float = 5.0


@dataclass(frozen=True)
class WakeSection:
    k: float | None = 0.05
    eps: float = 0.25


@dataclass(frozen=True)
class TurbulenceSection:
    duration: float = 7200.0
    correlation_time: float = 60.0
    direction_std: float = 3.0
    meander_scale: float = 1.0
    n_train_boxes: int = 10
    n_eval_boxes: int = N_EVAL_BOXES


@dataclass(frozen=True)
class LutSection:
    wd_axis: tuple[float, ...] = tuple(float(x) for x in range(240, 301, 2))
    ws_axis: tuple[float, ...] = tuple(float(x) for x in range(4, 26))
    rho: float = 0.05


@dataclass(frozen=True)
class TrainSection:
    total_steps: int = 50_000
    snapshot_every: int = 12_500


@dataclass(frozen=True)
class EvalSection:
    directions: tuple[float, ...] = (260.0, 265.0, 270.0, 275.0, 280.0)
    speeds: tuple[float, ...] = EVAL_SPEEDS
    boxes: tuple[int, ...] = (0, 1, 2)
    horizon_s: float = 3600.0
    turbulence_intensity: float = 0.05
    deterministic: bool = False


@dataclass(frozen=True)
class RunSection:
    sizes: tuple[str, ...] = tuple(DATASET_SIZES)
    seeds: tuple[int, ...] = (0, 1, 2)
    master_seed: int = 0
    workers: int = 1


SECTIONS = {
    "farm": FarmSection, "wake": WakeSection, "turbulence": TurbulenceSection,
    "env": EnvConfig, "yaw_opt": SerialRefineSettings, "lut": LutSection, "sac": SacConfig,
    "pretrain": PretrainConfig, "train": TrainSection, "eval": EvalSection, "run": RunSection,
}

PROFILES = {
    "desk": {},
    "paper": {
        "train": {"total_steps": 1_000_000, "snapshot_every": 250_000},
        "eval": {"directions": list(EVAL_DIRECTIONS), "speeds": list(EVAL_SPEEDS),
                 "boxes": list(range(N_EVAL_BOXES))},
        "run": {"seeds": [0, 1, 2, 3, 4]},
    },
}


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    return cls(**{k: _tuplify(v) for k, v in data.items()})


@dataclass(frozen=True)
class RunConfig:
    farm: FarmSection = FarmSection()
    wake: WakeSection = WakeSection()
    turbulence: TurbulenceSection = TurbulenceSection()
    env: EnvConfig = EnvConfig()
    yaw_opt: SerialRefineSettings = SerialRefineSettings()
    lut: LutSection = LutSection()
    sac: SacConfig = SacConfig()
    pretrain: PretrainConfig = PretrainConfig()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    run: RunSection = RunSection()

    def __post_init__(self):
        if not self.run.seeds:
            raise ValueError("at least one seed is required")
        bad = [s for s in self.run.sizes if s not in DATASET_SIZES]
        if bad:
            raise ValueError(f"unknown dataset size(s): {bad}")
        if self.train.total_steps < 0 or self.train.snapshot_every <= 0:
            raise ValueError("total_steps must be >= 0 and snapshot_every > 0")

    @classmethod
    def from_dict(cls, doc: dict, profile: str = "desk") -> "RunConfig":
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for name, section in SECTIONS.items():
            merged = {**PROFILES[profile].get(name, {}), **doc.get(name, {})}
            kwargs[name] = _build(section, merged, name)
        return cls(**kwargs)

    @classmethod
    def load(cls, path=None, profile: str = "desk") -> "RunConfig":
        doc = json.loads(Path(path).read_text()) if path else {}
        return cls.from_dict(doc, profile)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_run(self, **changes) -> "RunConfig":
        return replace(self, run=replace(self.run, **changes))

    # -- object factories ----------------------------------------------------

    def turbine(self) -> TurbineSpec:
        return TurbineSpec.from_json(self.farm.turbine) if self.farm.turbine else TurbineSpec()

    def layout(self) -> FarmLayout:
        return FarmLayout.grid(self.farm.nx, self.farm.ny, self.farm.spacing_d, self.turbine())

    def wake_model(self) -> WakeModel:
        return WakeModel(self.wake.k, self.wake.eps)

    def box_seeds(self) -> dict[str, list[int]]:
        """Deterministic per-box seeds derived from the master seed."""
        ss = np.random.SeedSequence(self.run.master_seed)
        t = self.turbulence
        seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(t.n_train_boxes + t.n_eval_boxes)]
        return {"train": seeds[: t.n_train_boxes], "eval": seeds[t.n_train_boxes:]}

