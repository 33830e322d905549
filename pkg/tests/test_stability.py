import math

import numpy as np
import pytest

from gridreg.grid import scenario_from_dict
from gridreg.network import ClosedLoop, assemble_A
from gridreg.stability import (ExpKL, GainGraph, LinearGain, TabulatedGain, beta_candidate, certify,
                               check_contraction, gain_graph, verify_iss_bound)

from conftest import GEN, three_bus_doc


def _pair(g):
    return GainGraph(("a", "b"), {("a", "b"): g, ("b", "a"): LinearGain(0.1)})


def test_linear_contraction_verdicts():
    assert check_contraction(_pair(LinearGain(0.5)))[("a", "b")]
    assert not check_contraction(_pair(LinearGain(1.0)))[("a", "b")]


def test_tabulated_gain_checked_on_samples():
    half = TabulatedGain.from_function(lambda s: 0.5 * s)
    assert check_contraction(_pair(half))[("a", "b")]
    ident = TabulatedGain.from_function(lambda s: s)
    assert not check_contraction(_pair(ident))[("a", "b")]
    assert float(half(1e-9)) == pytest.approx(0.5e-9)


def test_class_k_validation():
    with pytest.raises(ValueError):
        TabulatedGain.from_function(lambda s: 1.0 + s)
    with pytest.raises(ValueError):
        TabulatedGain(np.array([1.0, 2.0]), np.array([2.0, 1.0]))
    with pytest.raises(ValueError):
        LinearGain(-0.1)
    with pytest.raises(ValueError):
        GainGraph(("a",), {("a", "a"): LinearGain(0.1)})
    with pytest.raises(ValueError):
        check_contraction(_pair(LinearGain(0.5)), samples=[0.0, 1.0])


def test_passive_gain_from_damping():
    doc = three_bus_doc()
    doc["buses"].append({"id": 4, "kind": "G", "params": dict(GEN)})
    doc["edges"] = [[1, 3, 1.5], [2, 3, 1.5], [4, 3, 1.5], [1, 2, 1.5]]
    loop = ClosedLoop(scenario_from_dict(doc), "robust")
    g = gain_graph(loop, alpha=0.99)
    into = {v: e for (u, v), e in g.edges.items() if u == (3, "T")}
    assert into
    for e in into.values():
        assert e.c == pytest.approx(4.5 / (0.99 * 15.0))
        assert e.c == pytest.approx(0.303, abs=1e-3)
    assert all(check_contraction(g)[((3, "T"), v)] for v in into)


def test_single_node_composite_bound():
    g = GainGraph(("a",), {}, {"a": ExpKL(1.0, 1.0)})
    beta = beta_candidate(g, 2.0)
    t = np.linspace(0, 5, 11)
    assert np.allclose(beta(3.0, t), 3.0 * np.exp(-t))
    assert np.all(beta(0.0, t) == 0)
    with pytest.raises(ValueError):
        beta_candidate(g, 1.0)
    with pytest.raises(ValueError):
        beta_candidate(GainGraph(("a", "b"), {}, {"a": ExpKL(1.0, 1.0)}), 2.0)


def test_composite_bound_time_scale():
    g = GainGraph(tuple("abc"), {}, {k: ExpKL(1.0, 1.0) for k in "abc"})
    beta = beta_candidate(g, 2.0)
    assert beta.time_scale == pytest.approx(16.0)
    # n sum_i beta_i(n sum_k beta_k(x, 0), t / 16) with identical nodes
    assert float(beta(1.0, 16.0)) == pytest.approx(3 * 3 * 9.0 * math.exp(-1.0))


def test_decaying_scalar_is_tight():
    t = np.linspace(0, 5, 501)
    x = np.exp(-t)
    rep = verify_iss_bound(t, x, lambda s, tau: s * np.exp(-tau))
    assert rep.passed and rep.min_margin >= -1e-15


def test_disturbance_term_and_grid_checks():
    t = np.linspace(0, 1, 11)
    x = np.full(11, 0.5)
    beta = lambda s, tau: 0.0 * tau
    assert not verify_iss_bound(t, x, beta).passed
    rep = verify_iss_bound(t, x, beta, gamma_d=LinearGain(1.0), disturbance=np.full(11, 0.6))
    assert rep.passed
    with pytest.raises(ValueError):
        verify_iss_bound(np.r_[0.0, 0.1, 0.3], np.ones(3), beta)
    with pytest.raises(ValueError):
        verify_iss_bound(t, np.ones(5), beta)
    with pytest.raises(ValueError):
        verify_iss_bound(t, x, beta, disturbance=np.ones(11))


def test_certificate_round_trip(three_bus):
    loop = ClosedLoop(three_bus, "robust")
    A = assemble_A(loop)
    graph = gain_graph(loop, A)
    cert = certify(graph)
    again = certify(graph)
    assert cert.verdicts == again.verdicts
    d = cert.to_dict()
    assert d["edges"] == len(graph.edges)
    assert d["contraction"] == all(check_contraction(graph).values())


def test_worst_edges_with_ties(three_bus):
    loop = ClosedLoop(three_bus, "robust")
    graph = gain_graph(loop)
    worst = certify(graph).worst_edges(graph, 3)
    assert len(worst) == 3
    assert worst[0][0] == max(g.c for g in graph.edges.values())
