import numpy as np
import pytest

from gridreg import sim
from gridreg.grid import scenario_from_dict
from gridreg.local import LocalityError
from gridreg.network import ClosedLoop
from gridreg.plant import IntegrationError

from conftest import three_bus_doc


@pytest.fixture(scope="module")
def short_run():
    sc = scenario_from_dict(three_bus_doc())
    return sim.run(sc, "robust", dt=0.01, t_end=0.9, decimate=10)


def test_record_shapes(short_run):
    rec = short_run
    assert rec.t.size == 10 and len(rec.bus_ids) == 3
    assert rec.w.shape == (10, 3) and rec.inputs.shape == (10, 3, 2)
    assert np.isnan(rec.P_M[0, 1]) and np.isnan(rec.P_E[0, 2])
    with pytest.raises(ValueError):
        sim.RunRecord(np.array([0.0, 0.1, 0.3]), [1], *(np.zeros((3, 1)),) * 5, np.zeros(3), np.zeros(3),
                      np.zeros((3, 1, 2)))


def test_csv_layout_and_round_trip(short_run, tmp_path):
    p = tmp_path / "a.csv"
    sim.export_csv(short_run, p)
    lines = p.read_text().splitlines()
    assert len(lines) == 11
    assert lines[0].startswith("t,bus1_w,bus1_theta_dev,") and lines[0].endswith(",xhat_norm")
    header, data = sim.read_csv(p)
    assert header == sim.csv_header(short_run)
    # nine significant digits: half a unit in the last place
    half_ulp = 5e-9
    for col, ref in ((0, short_run.t), (1, short_run.w[:, 0]), (-1, short_run.xhat_norm)):
        assert np.all(np.abs(data[:, col] - ref) <= half_ulp * np.abs(ref))
    q = tmp_path / "b.csv"
    sim.export_csv(short_run, q)
    assert p.read_bytes() == q.read_bytes()


def test_csv_decimation(tmp_path):
    sc = scenario_from_dict(three_bus_doc())
    rec = sim.run(sc, "robust", dt=0.01, t_end=0.99, decimate=1)
    assert rec.t.size == 100
    p = tmp_path / "d.csv"
    sim.export_csv(rec, p, decimate=10)
    assert len(p.read_text().splitlines()) == 11
    with pytest.raises(ValueError):
        sim.export_csv(rec, p, decimate=0)


def test_equilibrium_without_wind_is_constant():
    sc = scenario_from_dict(three_bus_doc(wind=False, initial="manifold"))
    rec = sim.run(sc, "robust", dt=1e-3, t_end=5.0, decimate=100)
    assert np.max(np.abs(rec.w - rec.w[0])) < 1e-6
    assert np.max(np.abs(rec.theta_dev)) < 1e-6
    assert np.nanmax(np.abs(rec.P_M - rec.P_M[0])) < 1e-6


def test_baseline_matches_robust_without_wind():
    sc = scenario_from_dict(three_bus_doc(wind=False))
    a = sim.run(sc, "robust", dt=1e-3, t_end=10.0, decimate=50)
    b = sim.run(sc, "baseline", dt=1e-3, t_end=10.0, decimate=50)
    assert np.max(np.abs(a.w - b.w)) < 1e-9
    assert np.max(np.abs(a.theta_dev - b.theta_dev)) < 1e-9
    c = sim.compare(sc, window=(5.0, 10.0), dt=1e-3, t_end=10.0, decimate=50)
    assert c.ratio == pytest.approx(1.0, abs=1e-6)


def test_baseline_keeps_oscillating_at_wind_frequencies():
    sc = scenario_from_dict(three_bus_doc())
    rec = sim.run(sc, "baseline", dt=1e-2, t_end=400.0, decimate=10)
    k = rec.t >= 100.0
    t, y = rec.t[k], rec.w[k, 0] - 60.0
    cols = [np.ones_like(t)]
    for r in (0.1, 0.2):
        cols += [np.sin(r * t), np.cos(r * t)]
    X = np.stack(cols, axis=1)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    explained = 1.0 - np.var(y - X @ coef) / np.var(y)
    assert np.std(y) > 1e-4
    assert explained > 0.99


def test_wind_gate_follows_events(ieee68_compare):
    loop = ClosedLoop(ieee68_compare, "robust")
    assert np.all(loop.gate(5.0) == 0) and np.all(loop.gate(10.0) == 1)
    assert np.all(loop.gate(119.99) == 1) and np.all(loop.gate(120.0) == 0)
    z = loop.initial_state()
    s = loop.signals(5.0)
    assert np.all(loop.pren(5.0, z, s, loop.gate(5.0)) == 0)


def test_blow_up_reports_time_and_bus():
    sc = scenario_from_dict(three_bus_doc())
    with pytest.raises(IntegrationError) as info:
        sim.run(sc, "robust", dt=0.5, t_end=2000.0)
    assert info.value.time is not None and info.value.time > 0
    assert info.value.bus in (1, 2, 3)


def test_locality_view_refuses_non_neighbors(ieee68):
    loop = ClosedLoop(ieee68, "robust")
    z = loop.initial_state()
    v = sim.local_view(loop, 0, 0.0, z)
    far = next(b for b in loop.bus_ids if b not in v.bus.neighbors and b != v.bus.id)
    with pytest.raises(LocalityError):
        v.theta(far)
    with pytest.raises(AttributeError):
        v.extra = 1


def test_filter_gain_unit_frequency():
    assert sim.filter_gain(1.0) == pytest.approx(1 / np.sqrt(2), rel=0.02)
