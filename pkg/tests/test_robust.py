import math

import numpy as np
import pytest
from scipy.linalg import expm

from gridreg.grid import scenario_from_dict
from gridreg.local import LocalView, raw_columns
from gridreg.network import designs_for
from gridreg.robust import (GainSet1, baseline_control, control_law_s1, design_gains_alg1, e_eta,
                            hat_transform_s1, manifolds_s1)

from conftest import GEN, three_bus_doc


def _gen_only(demand=100.0, wind=False):
    g = {"id": 1, "kind": "G", "params": dict(GEN),
         "inelastic_demand": {"constant": demand, "terms": [{"amplitude": 20.0, "frequency_rad": 0.05}]}}
    if wind:
        g["wind"] = {"rho_low": [0.1], "rho_med": [0.2], "psi": [10.0, 0.0, 10.0, 0.0], "chi0": [0.0, 3.0, 0.0, 8.0]}
    doc = {"buses": [g], "edges": [], "controller": {"design": "manual", "gains": {"G": [5, 10, 15, 35, 3]}}}
    sc = scenario_from_dict(doc)
    return sc, designs_for(sc, "robust")[1]


def _view(d, state, eta, t=0.0, nbr=None):
    return LocalView(d.bus, state, eta, t, nbr or {j: 0.0 for j in d.bus.neighbors})


def _on_manifold(d, eta, t):
    man = manifolds_s1(d.bus, d.gains, eta, t)
    st = {"delta": d.bus.theta_star, "w": d.bus.w_star}
    for col in raw_columns(d.bus.kind, "robust")[2:]:
        st[col] = man[col]
    return man, st


def test_constant_demand_manifold():
    sc = scenario_from_dict({"buses": [{"id": 1, "kind": "G", "params": dict(GEN),
                                        "inelastic_demand": {"constant": 100.0, "terms": []}}],
                             "edges": [], "controller": {"design": "manual", "gains": {"G": [5, 10, 15, 35, 3]}}})
    d = designs_for(sc, "robust")[1]
    man = manifolds_s1(d.bus, d.gains, np.zeros(0), 0.0)
    assert man["P_M"] == pytest.approx(160.0)
    assert man["P_v"] == pytest.approx(160.0)
    assert man["P_ref"] == pytest.approx(160.0 + 60.0 / GEN["R"])
    assert man["lam"] == pytest.approx(d.bus.params.b)


def test_manifold_family_is_consistent_in_time():
    _, d = _gen_only(wind=True)
    s = d.spec
    chi0 = np.array([0.0, 3.0, 0.0, 8.0])

    def man(t):
        return manifolds_s1(d.bus, d.gains, s.T_star @ expm(s.Phi * t) @ chi0, t)

    # five-point stencil; a small step would amplify rounding in T*^-1
    h = 1e-2
    for t in (0.7, 3.0, 12.5):
        f = [man(t + j * h)["P_M"] for j in (-2, -1, 1, 2)]
        dPM = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h)
        m0 = man(t)
        assert abs(dPM - (m0["P_v"] - m0["P_M"]) / GEN["T_CH"]) < 1e-8 * max(1.0, abs(m0["P_M"]))


def test_hat_vanishes_on_manifold_and_control_equals_feedforward():
    _, d = _gen_only(wind=True)
    s = d.spec
    for t in (0.0, 4.2):
        th = s.T_star @ expm(s.Phi * t) @ np.array([0.0, 3.0, 0.0, 8.0])
        man, st = _on_manifold(d, th, t)
        v = _view(d, st, th, t)
        xh = hat_transform_s1(v, d.gains, target=th)
        assert np.max(np.abs(xh)) < 1e-9 * max(1.0, abs(man["P_M"]))
        u = control_law_s1(v, d.gains)
        assert u == pytest.approx((man["P_ref"], man["lam"]), rel=1e-12, abs=1e-9)


def test_second_coordinate_from_angle_error():
    _, d = _gen_only()
    k1 = 10 * math.pi + 0.1
    gains = GainSet1.build(d.bus, (k1, 10, 15, 35, 3))
    man, st = _on_manifold(d.__class__(gains, d.spec, d.bus), np.zeros(0), 0.0)
    st["delta"] = d.bus.theta_star + 2 * math.pi
    xh = hat_transform_s1(_view(d, st, np.zeros(0)), gains)
    assert xh[0] == pytest.approx(2 * math.pi)
    assert xh[1] == pytest.approx(k1)


def test_price_feedback_on_fifth_coordinate():
    from gridreg.robust import S1Group

    _, d = _gen_only()
    g = S1Group([d.bus], [d.gains])
    _, lam = g.feedback(np.array([[0.0, 0.0, 0.0, 0.0, 1.0]]))
    assert lam[0] == pytest.approx(d.bus.params.c + d.gains.k[4])


def test_baseline_equals_robust_without_estimate():
    sc = scenario_from_dict(three_bus_doc())
    for d in designs_for(sc, "robust").values():
        st = {c: 0.3 * (i + 1) for i, c in enumerate(raw_columns(d.bus.kind, "robust"))}
        v0 = _view(d, st, np.zeros(2 * d.bus.ell), 1.0, {j: 0.1 for j in d.bus.neighbors})
        assert baseline_control(v0, d.gains) == control_law_s1(v0, d.gains)
        v1 = _view(d, st, np.ones(2 * d.bus.ell), 1.0, {j: 0.1 for j in d.bus.neighbors})
        assert baseline_control(v1, d.gains) == baseline_control(v0, d.gains)


def test_gain_count_and_sign_checked():
    _, d = _gen_only()
    with pytest.raises(ValueError):
        GainSet1.build(d.bus, (1, 2, 3))
    with pytest.raises(ValueError):
        GainSet1.build(d.bus, (1, 2, 3, 4, -5))
    assert d.gains.consistent_with(d.bus)


def test_algorithm1_first_gain_and_scaling(three_bus):
    designs = design_gains_alg1(three_bus, delta=0.1)
    for d in designs.values():
        assert d.gains.k[0] == pytest.approx(31.5159265358979)
        if d.spec is None:
            continue
        ell = d.spec.ell
        C = np.ones(2 * ell) / math.sqrt(2 * ell)
        norms = [np.linalg.norm(e) for e in e_eta(d.gains.k[0], d.bus.params, d.bus.sum_t, d.spec.M, C)]
        lam_max = np.max(np.linalg.eigvals(d.spec.M).real)
        assert lam_max == pytest.approx(-2.0)
        assert d.gains.alpha == pytest.approx(2.0 / 1.1 * min(0.2 / v for v in norms))
        assert np.linalg.norm(d.spec.N) == pytest.approx(d.gains.alpha)


def test_algorithm1_rejects_bad_delta(three_bus):
    with pytest.raises(ValueError):
        design_gains_alg1(three_bus, delta=0.0)
