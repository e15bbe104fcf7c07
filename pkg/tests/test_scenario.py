import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import chain
from kernelvar.feeder import ieee13_feeder, line_flow_features
from kernelvar.scenario import (
    FeatureSelector,
    ScenarioRecord,
    ScenarioWindow,
    SynthesisOptions,
    TimeseriesError,
    draw_reactive_loads,
    fit_standardizer,
    load_timeseries,
    reactive_limit,
    reactive_limits,
    reference_day,
    scale_profiles,
    select_features,
    synthesize_day,
    write_timeseries,
)


def records_from(rng, T, n, t0=0):
    return [
        ScenarioRecord(t0 + t, rng.uniform(0, 0.4, n), rng.uniform(0.05, 1.0, n), rng.uniform(0, 0.2, n))
        for t in range(T)
    ]


def test_reactive_limit_examples():
    assert reactive_limit(5.0, 3.0) == 4.0
    assert reactive_limit(2.5, 0.0) == 2.5
    with pytest.warns(RuntimeWarning):
        assert reactive_limit(5.0, 6.0) == 0.0


@given(st.floats(0, 10), st.floats(0, 10))
def test_reactive_limit_range(s_bar, p_g):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        q = reactive_limit(s_bar, p_g)
    assert 0.0 <= q <= s_bar
    if p_g <= s_bar:
        assert q * q + p_g * p_g == pytest.approx(s_bar * s_bar, rel=1e-9, abs=1e-12)


def test_reactive_limits_vectorized(rng):
    s = rng.uniform(0.5, 1.0, 4)
    p = rng.uniform(0, 0.5, (3, 4))
    ref = np.array([[reactive_limit(s[j], p[i, j]) for j in range(4)] for i in range(3)])
    np.testing.assert_allclose(reactive_limits(s, p), ref, rtol=1e-15)


def test_timeseries_empty(tmp_path):
    f = tmp_path / "ts.csv"
    f.write_text("t_min,bus,p_load_pu,q_load_pu,p_solar_pu\n")
    assert load_timeseries(f) == []


def test_timeseries_echo(tmp_path):
    f = tmp_path / "ts.csv"
    rows = ["t_min,bus,p_load_pu,q_load_pu,p_solar_pu"]
    for t in range(3):
        for b in (1, 2):
            rows.append(f"{600 + t},{b},{0.1 * b + t},{0.01 * b},{0.2 * t}")
    f.write_text("\n".join(rows) + "\n")
    recs = load_timeseries(f, 2)
    assert [r.t_min for r in recs] == [600, 601, 602]
    for t, r in enumerate(recs):
        np.testing.assert_allclose(r.p_c, [0.1 + t, 0.2 + t])
        np.testing.assert_allclose(r.q_c, [0.01, 0.02])
        np.testing.assert_allclose(r.p_g, [0.2 * t, 0.2 * t])


def test_timeseries_duplicate_row(tmp_path):
    f = tmp_path / "ts.csv"
    f.write_text("t_min,bus,p_load_pu,q_load_pu,p_solar_pu\n0,1,0.1,0,0\n0,2,0.1,0,0\n0,1,0.2,0,0\n")
    with pytest.raises(TimeseriesError, match=":4:"):
        load_timeseries(f)


@pytest.mark.parametrize(
    "body",
    [
        "t_min,bus,p_load_pu,q_load_pu,p_solar_pu\n0,1,x,0,0\n",
        "t_min,bus,p_load_pu,q_load_pu,p_solar_pu\n0,1,-1,0,0\n",
        "t_min,bus,p_load_pu,q_load_pu,p_solar_pu\n0,5,1,0,0\n",
        "t_min,bus,p_load\n0,1,1\n",
    ],
)
def test_timeseries_malformed(tmp_path, body):
    f = tmp_path / "ts.csv"
    f.write_text(body)
    with pytest.raises(TimeseriesError):
        load_timeseries(f, 2)


def test_timeseries_gap_filled(tmp_path):
    f = tmp_path / "ts.csv"
    f.write_text("t_min,bus,p_load_pu,q_load_pu,p_solar_pu\n0,1,0.1,,0\n2,1,0.3,0,0\n")
    with pytest.warns(RuntimeWarning):
        recs = load_timeseries(f, 1)
    assert [r.t_min for r in recs] == [0, 1, 2]
    assert recs[1].p_c.tolist() == [0.0]


def test_timeseries_round_trip(tmp_path, rng):
    recs = records_from(rng, 5, 3, t0=100)
    write_timeseries(recs, tmp_path / "ts.csv")
    back = load_timeseries(tmp_path / "ts.csv", 3)
    for a, b in zip(recs, back):
        assert a.t_min == b.t_min
        for f in ("p_g", "p_c", "q_c"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_scale_profiles_examples():
    recs = [ScenarioRecord(t, np.array([0.4 * t]), np.array([v]), np.array([0.1 * v])) for t, v in enumerate([1.0, 2.0, 0.5])]
    out = scale_profiles(recs, 0.5, [1.0])
    assert max(r.p_c[0] for r in out) == pytest.approx(0.5)
    assert out[2].p_g[0] == pytest.approx(0.25 * 0.8)
    same = scale_profiles(recs, 1.0, [2.0])
    for a, b in zip(recs, same):
        np.testing.assert_array_equal(a.p_c, b.p_c)


def test_scale_profiles_random(rng):
    recs = records_from(rng, 20, 4)
    bench = rng.uniform(0.5, 2.0, 4)
    out = scale_profiles(recs, 0.5, bench)
    peaks = np.max([r.p_c for r in out], axis=0)
    np.testing.assert_allclose(peaks, 0.5 * bench, rtol=0, atol=1e-12)


def test_reactive_loads():
    recs = [ScenarioRecord(0, np.zeros(2), np.array([0.9, 0.5]), np.zeros(2))]
    unity = draw_reactive_loads(recs, power_factors=[1.0, 1.0])
    np.testing.assert_allclose(unity[0].q_c, 0.0, atol=1e-15)
    out = draw_reactive_loads(recs, power_factors=[0.9, 0.9])
    assert out[0].q_c[0] == pytest.approx(0.9 * np.sqrt(1 - 0.81) / 0.9, abs=1e-12)
    assert out[0].q_c[0] == pytest.approx(0.43589, abs=1e-5)


def test_reactive_loads_deterministic(rng):
    recs = records_from(rng, 4, 3)
    a = draw_reactive_loads(recs, seed=5)
    b = draw_reactive_loads(recs, seed=5)
    for ra, rb in zip(a, b):
        np.testing.assert_array_equal(ra.q_c, rb.q_c)
    ratio = np.array([r.q_c / r.p_c for r in a])
    pf = np.cos(np.arctan(ratio[0]))
    assert np.all((pf >= 0.9 - 1e-12) & (pf <= 0.95 + 1e-12))
    np.testing.assert_allclose(ratio, ratio[0][None, :].repeat(4, 0), rtol=1e-12)


def test_synthesize_day_shape():
    topo, _ = ieee13_feeder()
    recs = synthesize_day(topo, 3, SynthesisOptions(clear_sky_peak=0.8, cloud_noise=0.0))
    assert len(recs) == 1440
    np.testing.assert_array_equal(recs[0].p_g, 0.0)
    np.testing.assert_allclose(recs[780].p_g, 0.8 * topo.inverter_ratings, rtol=1e-12)
    assert all(np.all(r.p_g <= topo.inverter_ratings) for r in recs)


def test_synthesize_day_deterministic(tmp_path):
    topo, peaks = ieee13_feeder()
    for name in ("a.csv", "b.csv"):
        write_timeseries(reference_day(topo, peaks, 7), tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    other = reference_day(topo, peaks, 8)
    assert not np.array_equal(other[700].p_g, reference_day(topo, peaks, 7)[700].p_g)


def test_reference_day_load_peak():
    topo, peaks = ieee13_feeder()
    recs = reference_day(topo, peaks, 1)
    top = np.max([r.p_c for r in recs], axis=0)
    assert np.all(top <= 0.5 * peaks * 1.2)
    assert np.all(top >= 0.5 * peaks * 0.8)


def test_local_features_example():
    topo = chain([0.1], [0.1], ratings=np.array([0.5]))
    rec = ScenarioRecord(0, np.array([0.3]), np.array([0.2]), np.array([0.1]))
    win = ScenarioWindow.from_records([rec], topo)
    z = select_features(win, FeatureSelector("local"), topo)
    np.testing.assert_allclose(z[1], [[0.3, 0.4, 0.2, 0.1]], atol=1e-15)


def test_global_features_order():
    topo = chain([0.1, 0.1], [0.1, 0.1], ratings=np.array([0.5, 0.5]))
    rec = ScenarioRecord(0, np.array([0.1, 0.2]), np.array([3.0, 4.0]), np.array([5.0, 6.0]))
    z = select_features(ScenarioWindow.from_records([rec], topo), FeatureSelector("global"), topo)
    assert z[1].tolist() == [[3.0, 4.0, 5.0, 6.0, 0.1, 0.2]]
    assert FeatureSelector("global").dimension(topo) == 6


def test_hybrid_features(rng):
    topo, _ = ieee13_feeder()
    sel = FeatureSelector.parse("hybrid:1-2,1-3,1-5")
    assert str(sel) == "hybrid:1-2,1-3,1-5"
    assert sel.dimension(topo) == 7
    recs = [ScenarioRecord(t, rng.uniform(0, 1, 12) * topo.inverter_ratings, rng.uniform(0, 0.5, 12), np.zeros(12)) for t in range(4)]
    win = ScenarioWindow.from_records(recs, topo)
    z = select_features(win, sel, topo)
    assert set(z) == set(topo.inverter_buses)
    flows = line_flow_features(topo, win.p_g, win.p_c, sel.lines)
    for b, Z in z.items():
        assert Z.shape == (4, 7)
        np.testing.assert_array_equal(Z[:, 4:], flows)


def test_feature_selector_errors():
    with pytest.raises(ValueError):
        FeatureSelector.parse("hybrid")
    with pytest.raises(ValueError):
        FeatureSelector.parse("everything")


def test_standardizer(rng):
    Z = np.column_stack([rng.normal(3, 2, 50), np.full(50, 7.0), rng.uniform(size=50)])
    s = fit_standardizer(Z)
    out = s.apply(Z)
    np.testing.assert_array_equal(out[:, 1], 0.0)
    np.testing.assert_allclose(out[:, [0, 2]].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out[:, [0, 2]].std(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(s.invert(out), Z, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        fit_standardizer(Z[:1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_window_limits_in_range(seed):
    rng = np.random.default_rng(seed)
    topo = chain([0.1] * 3, [0.1] * 3, ratings=rng.uniform(0, 1, 3))
    recs = [ScenarioRecord(t, rng.uniform(0, 1.2, 3), rng.uniform(0, 1, 3), np.zeros(3)) for t in range(3)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        win = ScenarioWindow.from_records(recs, topo)
    assert np.all(win.q_bar >= 0)
    assert np.all(win.q_bar <= topo.inverter_ratings + 1e-15)
