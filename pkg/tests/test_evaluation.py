import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wakesac.env import WindFarmEnv, normalize_obs
from wakesac.evaluation import (CASE_COLUMNS, CaseResult, EvalCase, EvalReport, GreedyController,
                                LutController, SacController, aggregate_mean_gain, emit_flow_field,
                                emit_report, load_cases, make_grid, polyak_filter,
                                polyak_filter_direction, run_case, run_grid)
from wakesac.nn import init_mlp
from wakesac.wake import FarmLayout, InflowCondition
from wakesac.yaw_opt import build_lut


@pytest.fixture(scope="module")
def lut():
    return build_lut(FarmLayout.grid(), [250, 255, 260, 265, 270, 275, 280, 285, 290], [6, 8, 10, 12, 13, 15])


def fake(gain, wd=270.0, ws=10.0, box=0, seed=0, size="", step=0):
    return CaseResult(EvalCase(wd, ws, box, seed), gain, 1.0 + gain / 100, 1.0, "x", size, step)


# -- filter ------------------------------------------------------------------------

def test_polyak_examples():
    assert polyak_filter(10.0, 12.0, 0.05) == pytest.approx(10.1)
    assert polyak_filter(7.0, 7.0, 0.05) == 7.0
    with pytest.raises(ValueError):
        polyak_filter(1.0, 2.0, 0.0)


def test_polyak_geometric_convergence():
    x_hat, x, rho = 4.0, 9.0, 0.05
    for n in range(1, 60):
        x_hat = polyak_filter(x_hat, x, rho)
        assert x_hat - x == pytest.approx((4.0 - x) * (1 - rho) ** n, rel=1e-12)


def test_direction_filter_wraps():
    assert polyak_filter_direction(359.0, 1.0, 0.5) == pytest.approx(0.0, abs=1e-9) or \
        polyak_filter_direction(359.0, 1.0, 0.5) == pytest.approx(360.0, abs=1e-9)
    assert polyak_filter_direction(270.0, 270.0) == pytest.approx(270.0)
    assert polyak_filter_direction(260.0, 280.0, 0.5) == pytest.approx(270.0)


# -- controllers -----------------------------------------------------------------

def test_greedy_gain_is_exactly_zero(small_library):
    for wd in (255.0, 270.0, 283.0):
        res = run_case(GreedyController(), EvalCase(wd, 10.0, 1), small_library, horizon_s=300.0)
        assert res.gain_pct == 0.0


def test_eval_step_count(small_library):
    res = run_case(GreedyController(), EvalCase(270.0, 8.0, 0), small_library, record_series=True)
    assert len(res.series["time"]) == 360


def _steady_obs(env, ws, wd, yaws):
    n = env.layout.n_turbines
    raw = np.column_stack([np.full(n, ws), np.full(n, wd), yaws,
                           np.full(n, ws), np.full(n, wd), yaws])
    return normalize_obs(raw, env.config).ravel()


def test_lut_node_exact_and_fixed_point(small_library, lut):
    env = WindFarmEnv(small_library)
    ctl = LutController(lut)
    ctl.reset(env, EvalCase(270.0, 10.0, 0))
    node = lut.table[4, 2]
    a = ctl.act(_steady_obs(env, 10.0, 270.0, np.zeros(4)))
    np.testing.assert_array_equal(ctl.target, node)
    assert ctl.ws_hat == 10.0 and ctl.wd_hat == 270.0  # initialised at the first reading
    assert np.all(np.abs(a) <= 1) and np.any(a != 0)
    for _ in range(5):
        a = ctl.act(_steady_obs(env, 10.0, 270.0, node))
        np.testing.assert_array_equal(ctl.target, node)
        assert np.all(np.abs(a) < 1e-12)


def test_lut_upstream_resolution(lut):
    ctl = LutController(lut)
    ctl.positions = FarmLayout.grid().positions
    # turbines 0 and 2 sit on the western column, 0 and 1 on the southern row
    assert ctl.upstream(270.0) in (0, 2)
    assert ctl.upstream(90.0) in (1, 3)
    assert ctl.upstream(180.0) in (0, 1)


def test_lut_beats_greedy_on_aligned_case(small_library, lut):
    res = run_case(LutController(lut), EvalCase(270.0, 8.0, 0), small_library,
                   turbulence_intensity=0.0)
    assert res.gain_pct > 1.0


def test_edge_direction_gains_small(small_library, lut):
    for ctl in (GreedyController(), LutController(lut)):
        for ws in (8.0, 12.0):
            res = run_case(ctl, EvalCase(255.0, ws, 0), small_library)
            assert abs(res.gain_pct) < 1.0


# -- grid --------------------------------------------------------------------------

def test_grid_counts():
    assert len(make_grid([0])) == 4 * 7 * 6 == 168
    assert len(make_grid(range(5))) == 840
    assert len(set(c.case_id for c in make_grid(range(5)))) == 840


def test_order_and_parallel_independence(small_library):
    actor = init_mlp([24, 16, 16, 8], np.random.default_rng(0), out_scale=1.0)
    cases = make_grid([0, 1], (265.0, 275.0), (9.0,), (0, 2))
    kw = {"horizon_s": 200.0}
    a = run_grid(SacController(actor), cases, small_library, **kw)
    b = run_grid(SacController(actor), cases[::-1], small_library, **kw)
    c = run_grid(SacController(actor), cases, small_library, workers=2, **kw)
    ga = {r.case: r.gain_pct for r in a.results}
    assert ga == {r.case: r.gain_pct for r in b.results} == {r.case: r.gain_pct for r in c.results}
    assert len(set(ga.values())) == len(cases)


def test_grid_collects_failures(small_library):
    rep = run_grid(GreedyController(), [EvalCase(270.0, 10.0, 0), EvalCase(270.0, 10.0, 42)],
                   small_library, horizon_s=50.0)
    assert len(rep.results) == 1 and len(rep.failures) == 1
    assert "KeyError" in rep.failures[0][1]


# -- aggregation -------------------------------------------------------------------

def test_aggregate_examples():
    assert aggregate_mean_gain(EvalReport([fake(0.0), fake(0.0)]))["overall_gain_pct"] == 0.0
    assert aggregate_mean_gain(EvalReport([fake(2.0), fake(4.0)]))["overall_gain_pct"] == 3.0
    with pytest.raises(ValueError):
        aggregate_mean_gain(EvalReport())


@given(st.lists(st.floats(-20, 20), min_size=8, max_size=8))
def test_balanced_design_identity(gains):
    res = [fake(g, ws=[8.0, 10.0, 12.0, 13.0][i % 4], box=i // 4) for i, g in enumerate(gains)]
    agg = aggregate_mean_gain(EvalReport(res))
    assert agg["overall_gain_pct"] == pytest.approx(np.mean(list(agg["by_speed"].values())), abs=1e-9)


def test_ratio_reading():
    a = CaseResult(EvalCase(270, 8, 0), 10.0, 1.1, 1.0)
    b = CaseResult(EvalCase(270, 12, 0), 0.0, 3.0, 3.0)
    agg = aggregate_mean_gain(EvalReport([a, b]))
    assert agg["overall_gain_pct"] == pytest.approx(5.0)
    assert agg["ratio_gain_pct"] == pytest.approx((4.1 / 4.0 - 1) * 100)


# -- report files ------------------------------------------------------------------

def test_emit_empty_report(tmp_path):
    paths = emit_report(EvalReport(), tmp_path, "h0")
    lines = paths["cases.csv"].read_text().splitlines()
    assert lines == ["# config_hash: h0", ",".join(CASE_COLUMNS)]
    assert json.loads(paths["aggregate.json"].read_text())["n_cases"] == 0


def test_emit_reload_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    res = [fake(float(rng.normal()) * math.pi, c.wind_direction, c.wind_speed, c.box, c.seed,
                size=s, step=t)
           for c in make_grid([0]) for s, t in [("None", 0)]]
    res += [fake(float(rng.normal()), 270.0, 10.0, 0, 0, "Medium", 12500)]
    rep = EvalReport(res)
    paths = emit_report(rep, tmp_path, "abc")
    assert len(paths["cases.csv"].read_text().splitlines()) == 2 + 169
    back = aggregate_mean_gain(load_cases(paths["cases.csv"]))
    ref = aggregate_mean_gain(rep)
    assert back["overall_gain_pct"] == pytest.approx(ref["overall_gain_pct"], abs=1e-9)
    assert back["by_snapshot"] == pytest.approx(ref["by_snapshot"], abs=1e-9)
    agg = json.loads(paths["aggregate.json"].read_text())
    assert agg["config_hash"] == "abc" and agg["n_cases"] == 169
    heat = paths["heatmap.csv"].read_text().splitlines()
    assert heat[1] == "size,0,12500" and len(heat) == 4
    for name in ("by_speed.csv", "by_direction.csv", "heatmap.csv"):
        assert paths[name].read_text().startswith("# config_hash: abc")


def test_series_and_flow_field(tmp_path, small_library):
    res = run_case(GreedyController(), EvalCase(270.0, 10.0, 0), small_library,
                   horizon_s=50.0, record_series=True)
    emit_report(EvalReport([res]), tmp_path, "h", write_series=True)
    files = list((tmp_path / "series").glob("*.csv"))
    assert len(files) == 1 and len(files[0].read_text().splitlines()) == 2 + 5
    emit_flow_field(tmp_path / "flow.csv", FarmLayout.grid(), InflowCondition(8.0, 270.0),
                    [20.0, 0, 20.0, 0], nx=10, ny=5, config_hash="h")
    assert len((tmp_path / "flow.csv").read_text().splitlines()) == 2 + 50
