import numpy as np
import pytest

from kernelvar.crossval import CvGrid
from kernelvar.scenario import FeatureSelector, ScenarioRecord, TimeseriesError
from kernelvar.simulator import METHODS, SimulationConfig, cost_gap_report, run_simulation, write_manifest

SMALL_GRID = CvGrid(mu_values=(1e-5, 1e-3), gamma_multipliers=(1.0, 4.0))
HYBRID = FeatureSelector.parse("hybrid:1-2,1-3,1-5")


def config(**kw):
    base = dict(hours=(12.0, 13.0), features=HYBRID, cv=SMALL_GRID)
    base.update(kw)
    return SimulationConfig(**base)


@pytest.fixture(scope="module")
def noon_run(day):
    return run_simulation(day.topo, day.records[600:800], config())


def test_zero_data_zero_cost(day):
    n = day.topo.n_buses
    recs = [ScenarioRecord(t, np.zeros(n), np.zeros(n), np.zeros(n)) for t in range(0, 150)]
    res = run_simulation(day.topo, recs, config(hours=(1.0, 2.0), cv=None))
    for m in res.methods:
        np.testing.assert_allclose(res.step_cost[m], 0.0, atol=1e-15)
        np.testing.assert_allclose(res.gap[m], 0.0, atol=1e-15)


def test_gaps_and_feasibility(noon_run):
    res = noon_run
    assert res.methods == METHODS
    assert len(res.interval_start) == 2
    base = res.step_cost["optimal"]
    for m in res.methods:
        assert not np.any(np.isnan(res.step_cost[m]))
        assert np.all(res.step_cost[m] - base >= -1e-12)
        assert np.all(np.abs(res.applied[m]) <= res.q_bar + 1e-9)
    assert np.all(res.gap["zero"] >= 0)
    np.testing.assert_array_equal(res.gap["optimal"], 0.0)
    assert {s["method"] for s in res.selections} == {"gaussian", "linear"}
    for s in res.selections:
        assert s["mu"] in SMALL_GRID.mu_values


def test_stale_without_delay_is_optimal(day):
    res = run_simulation(day.topo, day.records[600:800], config(methods=("stale",), stale_delay=0, cv=None))
    np.testing.assert_array_equal(res.applied["stale"], res.applied["optimal"])
    assert res.methods == ("optimal", "stale")


def test_time_constant_data_ignores_retrain_period(day):
    rec = day.records[720]
    recs = [ScenarioRecord(t, rec.p_g, rec.p_c, rec.q_c) for t in range(600, 800)]
    costs = []
    for period in (10, 30):
        res = run_simulation(day.topo, recs, config(retrain_period=period, cv=None, methods=("gaussian", "linear")))
        costs.append(res.step_cost)
    for m in ("optimal", "gaussian", "linear"):
        np.testing.assert_allclose(costs[0][m], costs[1][m], rtol=1e-9, atol=1e-15)


def test_missing_history(day):
    with pytest.raises(TimeseriesError):
        run_simulation(day.topo, day.records[715:800], config())
    gappy = day.records[600:700] + day.records[701:800]
    with pytest.raises(TimeseriesError):
        run_simulation(day.topo, gappy, config())


@pytest.mark.parametrize(
    "kw",
    [dict(window=0), dict(stale_delay=-1), dict(lam=1.5), dict(methods=("best",)), dict(hours=(18.0, 11.0)),
     dict(window=3, cv=CvGrid(folds=5)), dict(mu=0.0)],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SimulationConfig(**kw)


def test_report(tmp_path, day, noon_run):
    cost_gap_report(noon_run, tmp_path / "a.csv")
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert rows[0] == "interval_start_min,method,avg_cost,gap_to_optimal"
    assert len(rows) == 1 + 2 * len(METHODS)
    for r in rows[1:]:
        start, m, _, gap = r.split(",")
        if m == "optimal":
            assert float(gap) == 0.0

    again = run_simulation(day.topo, day.records[600:800], config())
    cost_gap_report(again, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    write_manifest(noon_run, tmp_path / "m.json", {"seed": 0})
    assert '"selections"' in (tmp_path / "m.json").read_text()


def test_report_single_row(tmp_path, day):
    res = run_simulation(day.topo, day.records[600:800], config(methods=(), hours=(12.0, 12.5), cv=None))
    cost_gap_report(res, tmp_path / "r.csv")
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[1].startswith("720,optimal,") and rows[1].endswith(",0.0")
    assert len(rows) == 2
