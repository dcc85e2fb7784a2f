import csv
import json

import pytest

from wakesac import cli
from wakesac.config import PROFILES, RunConfig
from wakesac.nn import load_params
from wakesac.pretrain import ExpertDataset
from wakesac.sac import SacAgent

TINY = {
    "turbulence": {"duration": 600.0, "n_train_boxes": 2, "n_eval_boxes": 1},
    "env": {"horizon_s": 100.0},
    "lut": {"wd_axis": [260, 270, 280], "ws_axis": [8, 10, 12]},
    "sac": {"hidden": [8, 8], "batch_size": 4, "warmup_steps": 5, "buffer_capacity": 64},
    "pretrain": {"max_epochs": 2},
    "train": {"total_steps": 20, "snapshot_every": 10},
    "eval": {"directions": [270], "speeds": [10], "boxes": [0], "horizon_s": 100.0},
    "run": {"sizes": ["None", "Small"], "seeds": [0]},
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


# -- config ----------------------------------------------------------------------

def test_defaults_are_desk_scale():
    cfg = RunConfig()
    assert (cfg.train.total_steps, cfg.train.snapshot_every) == (50_000, 12_500)
    assert cfg.run.seeds == (0, 1, 2)
    assert cfg.sac.discount == 0.99 and cfg.pretrain.patience == 5


def test_paper_profile():
    cfg = RunConfig.from_dict({}, "paper")
    assert (cfg.train.total_steps, cfg.train.snapshot_every) == (1_000_000, 250_000)
    assert len(cfg.run.seeds) == 5 and len(cfg.run.sizes) == 4
    assert len(cli._cases(cfg, cfg.run.seeds[:1])) == 168
    assert len(cli._cases(cfg, cfg.run.seeds)) == 840
    assert set(PROFILES) == {"desk", "paper"}


@pytest.mark.parametrize("doc", [{"nope": {}}, {"sac": {"discout": 0.9}}, {"run": {"seeds": []}},
                                 {"run": {"sizes": ["Huge"]}}, {"sac": {"discount": 1.5}}])
def test_bad_config_rejected(doc):
    with pytest.raises(ValueError):
        RunConfig.from_dict(doc)


def test_hash_tracks_content():
    a, b = RunConfig(), RunConfig.from_dict({"sac": {"tau": 0.01}})
    assert a.hash == RunConfig().hash and a.hash != b.hash
    assert RunConfig.from_dict(json.loads(json.dumps(a.to_dict()))).hash == a.hash


def test_box_seeds_distinct_and_stable():
    s = RunConfig().box_seeds()
    assert len(s["train"]) == 10 and len(s["eval"]) == 6
    assert len(set(s["train"] + s["eval"])) == 16
    assert RunConfig().box_seeds() == s
    assert RunConfig().with_run(master_seed=1).box_seeds() != s


# -- exit codes ------------------------------------------------------------------

def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        run("frobnicate")
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        run("train", "--size", "Huge")
    assert e.value.code == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sac": {"bogus": 1}}))
    assert run("gen-turbulence", "--config", bad, "--out", tmp_path) == 1
    assert run("gen-turbulence", "--workers", 0, "--out", tmp_path) == 1
    assert run("gen-turbulence", "--config", tmp_path / "missing.json") == 1


def test_runtime_errors(tmp_path, tiny, capsys):
    assert run("gen-expert", "--config", tiny, "--out", tmp_path / "o") == 2
    assert run("evaluate", "--config", tiny, "--out", tmp_path / "o") == 2
    assert "gen-turbulence" in capsys.readouterr().err


# -- commands --------------------------------------------------------------------

def test_gen_turbulence_default_library(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("gen-turbulence", "--out", a) == 0
    assert run("gen-turbulence", "--out", b) == 0
    files = sorted(p.name for p in (a / "turbulence").iterdir())
    assert len(files) == 17 and "manifest.json" in files
    for name in files:
        assert (a / "turbulence" / name).read_bytes() == (b / "turbulence" / name).read_bytes()
    man = json.loads((a / "turbulence" / "manifest.json").read_text())
    roles = [x["role"] for x in man["boxes"]]
    assert roles.count("train") == 10 and roles.count("eval") == 6
    assert all("seed" in x for x in man["boxes"]) and man["config_hash"] == RunConfig().hash


def test_expert_sizes(tmp_path, tiny):
    out = tmp_path / "o"
    assert run("gen-turbulence", "--config", tiny, "--out", out) == 0
    assert run("gen-expert", "--config", tiny, "--out", out) == 0
    assert len(ExpertDataset.load(out / "expert" / "None.npz")) == 0
    small = ExpertDataset.load(out / "expert" / "Small.npz")
    assert len(small) == 10 and small.meta["size"] == "Small"
    before = (out / "expert" / "Small.npz").stat().st_mtime_ns
    assert run("gen-expert", "--config", tiny, "--out", out, "--size", "Small") == 0
    assert (out / "expert" / "Small.npz").stat().st_mtime_ns == before


def test_sweep_end_to_end_and_resume(tmp_path, tiny):
    out = tmp_path / "o"
    assert run("sweep", "--config", tiny, "--out", out) == 0
    cfg = RunConfig.load(tiny)

    # size None: the step-0 snapshot is the untouched initial agent
    nets, meta = load_params(out / "None" / "0" / "0.snap")
    fresh = SacAgent(24, 4, cfg.sac, 0)
    assert nets["actor"].equals(fresh.actor) and meta["pretrained"] is False
    # size Small: step-0 differs from init and carries the pretrain record
    nets, meta = load_params(out / "Small" / "0" / "0.snap")
    assert not nets["actor"].equals(fresh.actor) and meta["pretrained"] is True
    for size in ("None", "Small"):
        assert sorted(p.name for p in (out / size / "0").glob("*.snap")) == ["0.snap", "10.snap", "20.snap"]
        log = (out / size / "0" / "log.csv").read_text().splitlines()
        assert log[0] == f"# config_hash: {cfg.hash}"

    with open(out / "summary" / "heatmap.csv") as fh:
        rows = [r for r in csv.reader(ln for ln in fh if not ln.startswith("#"))]
    assert rows[0] == ["size", "0", "10", "20"] and [r[0] for r in rows[1:]] == ["None", "Small"]
    summary = json.loads((out / "summary" / "summary.json").read_text())
    assert summary["greedy"] == 0.0 and "lut" in summary and "snapshots" in summary
    greedy = json.loads((out / "eval" / "greedy" / "aggregate.json").read_text())
    assert greedy["overall_gain_pct"] == 0.0 and greedy["config_hash"] == cfg.hash

    stamps = {p: p.stat().st_mtime_ns for p in out.rglob("*") if p.is_file() and "summary" not in p.parts}
    assert run("sweep", "--config", tiny, "--out", out) == 0
    assert all(p.stat().st_mtime_ns == t for p, t in stamps.items())


def test_evaluate_and_report_commands(tmp_path, tiny):
    out = tmp_path / "o"
    for cmd in ("gen-turbulence", "gen-expert", "pretrain", "train"):
        assert run(cmd, "--config", tiny, "--out", out, "--size", "Small") == 0
    assert (out / "Small" / "0" / "pretrained.snap").exists()
    assert run("evaluate", "--config", tiny, "--out", out, "--baseline", "lut") == 0
    assert json.loads((out / "lut.json").read_text())["config_hash"] == RunConfig.load(tiny).hash
    assert run("evaluate", "--config", tiny, "--out", out,
               "--snapshots", out / "Small" / "0" / "*.snap") == 0
    rows = (out / "eval" / "snapshots" / "cases.csv").read_text().splitlines()
    assert len(rows) == 2 + 3  # three snapshots, one case each
    assert run("report", "--config", tiny, "--out", out) == 0
    assert (out / "summary" / "summary.json").exists()
    assert run("evaluate", "--config", tiny, "--out", out, "--snapshots", out / "nothing*.snap") == 2


def test_main_module_entry(tmp_path):
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "wakesac", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sweep" in r.stdout
