"""Command-line entry point: ``python -m wakesac <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig
from .env import WindFarmEnv
from .evaluation import (EvalReport, GreedyController, LutController, SacController,
                         aggregate_mean_gain, emit_report, load_cases, make_grid, run_grid)
from .nn import load_params
from .pretrain import DATASET_SIZES, ExpertDataset, env_hash, generate_expert_dataset, pretrain_agent
from .sac import SacAgent, TrainResult, snapshot_steps, train_online
from .turbulence import TurbulenceBox, generate_turbulence_box
from .yaw_opt import YawLut, build_lut

log = logging.getLogger("wakesac")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Paths and loaders
# ---------------------------------------------------------------------------

class Workspace:
    """File layout under the output directory."""

    def __init__(self, root, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg

    @property
    def turbulence_dir(self) -> Path:
        return self.root / "turbulence"

    @property
    def manifest(self) -> Path:
        return self.turbulence_dir / "manifest.json"

    def box_path(self, role: str, i: int) -> Path:
        return self.turbulence_dir / f"{role}_{i:02d}.npz"

    def expert_path(self, size: str) -> Path:
        return self.root / "expert" / f"{size}.npz"

    def run_dir(self, size: str, seed: int) -> Path:
        return self.root / size / str(seed)

    def snapshot_path(self, size: str, seed: int, step: int) -> Path:
        return self.run_dir(size, seed) / f"{step}.snap"

    @property
    def lut_path(self) -> Path:
        return self.root / "lut.json"

    def eval_dir(self, name: str) -> Path:
        return self.root / "eval" / name

    def boxes(self, role: str) -> list[TurbulenceBox]:
        if not self.manifest.exists():
            raise FileNotFoundError(f"{self.manifest} missing; run gen-turbulence first")
        doc = json.loads(self.manifest.read_text())
        entries = sorted((b for b in doc["boxes"] if b["role"] == role), key=lambda b: b["index"])
        return [TurbulenceBox.load(self.turbulence_dir / b["file"]) for b in entries]

    def env(self, role: str = "train") -> WindFarmEnv:
        return WindFarmEnv(self.boxes(role), self.cfg.layout(), self.cfg.env, self.cfg.wake_model())


def _write_json(path: Path, doc: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_turbulence(ws: Workspace, args) -> int:
    cfg, t = ws.cfg, ws.cfg.turbulence
    seeds = cfg.box_seeds()
    ws.turbulence_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for role in ("train", "eval"):
        for i, seed in enumerate(seeds[role]):
            path = ws.box_path(role, i)
            box = generate_turbulence_box(t.duration, seed, cfg.layout().n_turbines, cfg.env.dt_sim,
                                          t.correlation_time, t.direction_std, t.meander_scale)
            box.save(path)
            entries.append({"file": path.name, "role": role, "index": i, "seed": seed})
    _write_json(ws.manifest, {"config_hash": cfg.hash, "master_seed": cfg.run.master_seed,
                              "boxes": entries})
    log.info("wrote %d turbulence boxes to %s", len(entries), ws.turbulence_dir)
    return EXIT_OK


def _expert_rng(cfg: RunConfig, size: str) -> np.random.Generator:
    return np.random.default_rng([cfg.run.master_seed, list(DATASET_SIZES).index(size)])


def cmd_gen_expert(ws: Workspace, args) -> int:
    cfg = ws.cfg
    for size in _sizes(cfg, args):
        path = ws.expert_path(size)
        if path.exists() and not args.force:
            log.info("%s exists, skipping", path)
            continue
        env = ws.env("train")
        ds = generate_expert_dataset(DATASET_SIZES[size], _expert_rng(cfg, size), lambda: env,
                                     cfg.yaw_opt)
        ds.meta.update({"size": size, "config_hash": cfg.hash})
        path.parent.mkdir(parents=True, exist_ok=True)
        ds.save(path)
        log.info("expert dataset %s: %d episodes, %d pairs", size, len(ds), ds.n_pairs)
    return EXIT_OK


def _fresh_agent(ws: Workspace, seed: int) -> SacAgent:
    env = ws.env("train")
    return SacAgent(env.obs_dim, env.action_dim, ws.cfg.sac, seed)


def _pretrained_agent(ws: Workspace, size: str, seed: int) -> tuple[SacAgent, dict]:
    cfg = ws.cfg
    agent = _fresh_agent(ws, seed)
    info = {"size": size, "seed": seed, "pretrained": False}
    if DATASET_SIZES[size] == 0:
        return agent, info
    path = ws.expert_path(size)
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run gen-expert --size {size} first")
    ds = ExpertDataset.load(path, env_hash(ws.env("train")))
    pcfg = cfg.pretrain.__class__(**{**cfg.pretrain.to_dict(), "seed": seed})
    out = pretrain_agent(agent, ds, pcfg)
    if out is not None:
        actor_fit, critic = out
        info.update(pretrained=True, actor_best_epoch=actor_fit.best_epoch,
                    actor_stop_epoch=actor_fit.stop_epoch,
                    critic_best_epochs=[f.best_epoch for f in critic.fits],
                    return_mean=critic.return_mean, return_std=critic.return_std)
    return agent, info


def cmd_pretrain(ws: Workspace, args) -> int:
    for size in _sizes(ws.cfg, args):
        for seed in _seeds(ws.cfg, args):
            agent, info = _pretrained_agent(ws, size, seed)
            path = ws.run_dir(size, seed) / "pretrained.snap"
            path.parent.mkdir(parents=True, exist_ok=True)
            agent.save(path, {"config_hash": ws.cfg.hash, **info})
            log.info("pretrained %s/%s -> %s", size, seed, path)
    return EXIT_OK


def _train_one(root: str, cfg: RunConfig, size: str, seed: int) -> str:
    ws = Workspace(root, cfg)
    run = ws.run_dir(size, seed)
    final = ws.snapshot_path(size, seed, snapshot_steps(cfg.train.total_steps,
                                                        cfg.train.snapshot_every)[-1])
    if final.exists() and (run / "log.csv").exists():
        return f"{size}/{seed}: complete, skipped"
    run.mkdir(parents=True, exist_ok=True)
    pre = run / "pretrained.snap"
    if pre.exists():
        agent = _fresh_agent(ws, seed)
        meta = agent.load(pre)
        info = {k: meta[k] for k in ("size", "seed", "pretrained") if k in meta}
    else:
        agent, info = _pretrained_agent(ws, size, seed)
    meta = {"config_hash": cfg.hash, **info}

    def on_snapshot(step, ag):
        path = ws.snapshot_path(size, seed, step)
        ag.save(path, {**meta, "step": step})
        return str(path)

    env = ws.env("train")
    result = train_online(lambda: env, agent, cfg.train.total_steps, cfg.train.snapshot_every,
                          seed=seed, on_snapshot=on_snapshot)
    _write_log(run / "log.csv", result, cfg.hash)
    return f"{size}/{seed}: {len(result.snapshots)} snapshots"


def _write_log(path: Path, result: TrainResult, chash: str):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash: {chash}\n")
        w = csv.DictWriter(fh, TrainResult.LOG_COLUMNS)
        w.writeheader()
        for row in result.log:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def cmd_train(ws: Workspace, args) -> int:
    jobs = [(str(ws.root), ws.cfg, size, seed)
            for size in _sizes(ws.cfg, args) for seed in _seeds(ws.cfg, args)]
    workers = _workers(ws.cfg, args)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            msgs = list(pool.map(_train_one, *zip(*jobs)))
    else:
        msgs = [_train_one(*j) for j in jobs]
    for m in msgs:
        log.info("train %s", m)
    return EXIT_OK


def _lut(ws: Workspace, workers: int) -> YawLut:
    if ws.lut_path.exists():
        doc = json.loads(ws.lut_path.read_text())
        if doc.get("config_hash") == ws.cfg.hash:
            return YawLut.from_json(ws.lut_path)
    c = ws.cfg
    lut = build_lut(c.layout(), c.lut.wd_axis, c.lut.ws_axis, c.eval.turbulence_intensity,
                    c.yaw_opt, c.wake_model(), workers)
    lut.to_json(ws.lut_path, {"config_hash": c.hash})
    return lut


def _eval_kwargs(ws: Workspace) -> dict:
    c = ws.cfg
    return {"boxes": ws.boxes("eval"), "layout": c.layout(), "config": c.env,
            "model": c.wake_model(), "horizon_s": c.eval.horizon_s,
            "turbulence_intensity": c.eval.turbulence_intensity}


def _cases(cfg: RunConfig, seeds):
    e = cfg.eval
    return make_grid(seeds, e.directions, e.speeds, e.boxes)


def evaluate_baseline(ws: Workspace, name: str, seeds, workers: int) -> EvalReport:
    if name == "greedy":
        ctrl = GreedyController()
    elif name == "lut":
        ctrl = LutController(_lut(ws, workers), ws.cfg.lut.rho)
    else:
        raise UsageError(f"unknown baseline {name!r} (choose greedy or lut)")
    return run_grid(ctrl, _cases(ws.cfg, seeds), workers=workers, size=name, step=0,
                    **_eval_kwargs(ws))


def evaluate_snapshots(ws: Workspace, paths, workers: int) -> EvalReport:
    report = EvalReport()
    kwargs = _eval_kwargs(ws)
    for path in paths:
        nets, meta = load_params(path)
        size = str(meta.get("size", Path(path).parent.parent.name))
        seed = int(meta.get("seed", Path(path).parent.name))
        step = int(meta.get("step", Path(path).stem))
        ctrl = SacController(nets["actor"], ws.cfg.eval.deterministic)
        part = run_grid(ctrl, _cases(ws.cfg, [seed]), workers=workers, size=size, step=step, **kwargs)
        report.extend(part)
        log.info("evaluated %s: %d cases, %d failures", path, len(part), len(part.failures))
    return report


def _snapshot_paths(ws: Workspace, pattern: str | None) -> list[str]:
    pattern = pattern or str(ws.root / "*" / "*" / "*.snap")
    paths = sorted(p for p in glob.glob(pattern) if not p.endswith("pretrained.snap"))
    if not paths:
        raise FileNotFoundError(f"no snapshots match {pattern}")
    return paths


def cmd_evaluate(ws: Workspace, args) -> int:
    workers = _workers(ws.cfg, args)
    seeds = _seeds(ws.cfg, args)
    if args.baseline:
        report = evaluate_baseline(ws, args.baseline, seeds, workers)
        name = args.baseline
    else:
        report = evaluate_snapshots(ws, _snapshot_paths(ws, args.snapshots), workers)
        name = "snapshots"
    emit_report(report, ws.eval_dir(name), ws.cfg.hash, write_series=False)
    if report.results:
        log.info("%s: mean gain %.4f%% over %d cases", name,
                 aggregate_mean_gain(report)["overall_gain_pct"], len(report))
    return EXIT_OK if not report.failures else EXIT_RUNTIME


def cmd_report(ws: Workspace, args) -> int:
    """Rebuild summary files from the per-case CSVs already on disk."""
    combined = EvalReport()
    summary = {"config_hash": ws.cfg.hash}
    for cases in sorted((ws.root / "eval").glob("*/cases.csv")):
        part = load_cases(cases)
        name = cases.parent.name
        if part.results:
            summary[name] = aggregate_mean_gain(part)["overall_gain_pct"]
        if name == "snapshots":
            combined.extend(part)
    if not combined.results and len(summary) == 1:
        raise FileNotFoundError("no evaluation results found; run evaluate first")
    paths = emit_report(combined, ws.root / "summary", ws.cfg.hash)
    summary["heatmap"] = str(paths["heatmap.csv"])
    _write_json(ws.root / "summary" / "summary.json", summary)
    log.info("summary written to %s", ws.root / "summary")
    return EXIT_OK


def cmd_sweep(ws: Workspace, args) -> int:
    if not ws.manifest.exists():
        cmd_gen_turbulence(ws, args)
    args.size = None
    cmd_gen_expert(ws, args)
    cmd_train(ws, args)
    workers = _workers(ws.cfg, args)
    seeds = _seeds(ws.cfg, args)
    for name in ("greedy", "lut"):
        if not (ws.eval_dir(name) / "aggregate.json").exists():
            emit_report(evaluate_baseline(ws, name, seeds, workers), ws.eval_dir(name), ws.cfg.hash)
    if not (ws.eval_dir("snapshots") / "aggregate.json").exists():
        report = evaluate_snapshots(ws, _snapshot_paths(ws, None), workers)
        emit_report(report, ws.eval_dir("snapshots"), ws.cfg.hash)
    return cmd_report(ws, args)


COMMANDS = {
    "gen-turbulence": cmd_gen_turbulence, "gen-expert": cmd_gen_expert, "pretrain": cmd_pretrain,
    "train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "report": cmd_report,
}


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------

def _sizes(cfg: RunConfig, args) -> list[str]:
    return [args.size] if getattr(args, "size", None) else list(cfg.run.sizes)


def _seeds(cfg: RunConfig, args) -> list[int]:
    return [args.seed] if getattr(args, "seed", None) is not None else list(cfg.run.seeds)


def _workers(cfg: RunConfig, args) -> int:
    return args.workers if getattr(args, "workers", None) else cfg.run.workers


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections per module)")
    common.add_argument("--profile", choices=("desk", "paper"), default="desk")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, help="restrict to one seed")
    common.add_argument("--size", choices=list(DATASET_SIZES), help="restrict to one dataset size")
    common.add_argument("--workers", type=int, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="wakesac", description="Pretrained SAC for wind-farm yaw control.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=(COMMANDS[name].__doc__ or "").strip()
                            .split("\n")[0] or None)
        if name == "gen-expert":
            sp.add_argument("--force", action="store_true", help="overwrite existing datasets")
        if name == "evaluate":
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--baseline", choices=("greedy", "lut"))
            g.add_argument("--snapshots", help="glob of snapshot files (default: all)")
        if name == "sweep":
            sp.set_defaults(force=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.profile)
        if args.workers is not None and args.workers < 1:
            raise UsageError("--workers must be >= 1")
    except (UsageError, ValueError, TypeError, OSError) as exc:
        print(f"wakesac: bad configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](Workspace(args.out, cfg), args)
    except UsageError as exc:
        print(f"wakesac: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, KeyError, RuntimeError) as exc:
        print(f"wakesac: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
