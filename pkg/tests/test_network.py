import numpy as np
import pytest
from scipy.linalg import expm

from gridreg.grid import scenario_from_dict
from gridreg.network import (ClosedLoop, assemble_A, check_negdef, designs_for, hat_propagator, hat_trajectory,
                             hurwitz_certificate, is_hurwitz, negdef_certificate)

from conftest import GEN, three_bus_doc


def test_is_hurwitz_examples():
    r = is_hurwitz(-np.eye(3))
    assert r.passed and r.max_real == pytest.approx(-1.0)
    assert not is_hurwitz(np.array([[0.0, 1.0], [-1.0, 0.0]])).passed


def test_check_negdef_examples():
    assert check_negdef(-2 * np.eye(3)).passed
    assert not check_negdef(np.diag([-1.0, 0.5])).passed
    with pytest.raises(ValueError):
        check_negdef(np.array([[-1.0, 1.0], [0.0, -1.0]]))


def test_isolated_generator_spectrum_equals_gains():
    k = [5.0, 10.0, 15.0, 35.0, 3.0]
    sc = scenario_from_dict({"buses": [{"id": 1, "kind": "G", "params": dict(GEN)}], "edges": [],
                             "controller": {"design": "manual", "gains": {"G": k}}})
    A = assemble_A(ClosedLoop(sc, "robust"))
    assert A.shape == (5, 5)
    assert np.allclose(np.sort(np.linalg.eigvals(A).real), np.sort(-np.array(k)), atol=1e-8)


def _finite_difference_hat_rate(loop, t, z, h=1e-3):
    f = loop.field(t, z)
    pts = [loop.hat(t + j * h, z + j * h * f) for j in (-2, -1, 1, 2)]
    return (pts[0] - 8 * pts[1] + 8 * pts[2] - pts[3]) / (12 * h)


@pytest.mark.parametrize("wind", [True, False])
def test_network_matrix_reproduces_hat_dynamics(wind, rng):
    loop = ClosedLoop(scenario_from_dict(three_bus_doc(wind=wind)), "robust")
    A = assemble_A(loop)
    z = loop.initial_state("manifold") + 0.1 * rng.normal(size=loop.nz)
    # battery output on its steady state, otherwise its transient forces the hat dynamics
    for i, yi in enumerate(loop.y_index):
        z[yi] = loop.psi_rows[i] @ loop.filter_maps[i] @ z[loop.chi_slices[i]]
    xh = loop.hat(1.3, z)
    lhs = _finite_difference_hat_rate(loop, 1.3, z)
    assert np.allclose(lhs, A @ xh, rtol=1e-6, atol=1e-6 * np.abs(A @ xh).max())


def test_manual_68_bus_robust_gains_are_hurwitz(ieee68):
    r = hurwitz_certificate(ClosedLoop(ieee68, "robust"))
    assert r.passed
    assert r.max_real == pytest.approx(-0.398661, abs=1e-5)


def test_passive_damping_about_setpoint_keeps_rest_state():
    doc = three_bus_doc(wind=False)
    sc = scenario_from_dict(doc)
    z_dev = ClosedLoop(sc, "robust")
    z0 = z_dev.initial_state("manifold")
    assert np.max(np.abs(z_dev.hat(0.0, z0))) < 1e-9
    passive = z_dev.w_idx[2]
    assert z_dev.field(0.0, z0)[passive] == pytest.approx(0.0, abs=1e-12)
    absolute = ClosedLoop(sc, "robust", passive_damping="absolute")
    assert absolute.field(0.0, z0)[passive] == pytest.approx(-15.0 * 60.0 / 10.0)
    with pytest.raises(ValueError):
        ClosedLoop(sc, "robust", passive_damping="none")


def test_exact_propagator_matches_matrix_exponential():
    loop = ClosedLoop(scenario_from_dict(three_bus_doc()), "robust")
    A = assemble_A(loop)
    P = hat_propagator(loop, 0.01)
    assert np.allclose(P, expm(0.01 * A), rtol=1e-9, atol=1e-9)
    x0 = np.ones(A.shape[0])
    t, X = hat_trajectory(loop, x0, 0.01, 0.05)
    assert t.shape == (6,) and np.allclose(X[-1], np.linalg.matrix_power(P, 5) @ x0, rtol=1e-9)


def test_symmetric_certificate_reports_both_forms(three_bus):
    loop = ClosedLoop(three_bus, "adaptive", designs_for(three_bus, "adaptive"), freeze_estimate=True)
    cert = negdef_certificate(loop)
    assert np.isfinite(cert.literal.max_eig) and np.isfinite(cert.weighted.max_eig)
    assert cert.passed == cert.weighted.passed


def test_unknown_controller_rejected(three_bus):
    with pytest.raises(ValueError):
        ClosedLoop(three_bus, "pid")
