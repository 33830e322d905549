import warnings

import numpy as np
import pytest

from gridreg.internal_model import (ConfigurationError, InternalModelSpec, ObservabilityWarning,
                                    check_controllability, check_observability, default_M, exosystem_matrix,
                                    internal_model_rhs, reconstruct_ren, solve_sylvester, split_psi,
                                    sylvester_residual, symmetric_M)
from gridreg.plant import rk4_step

M2 = np.array([[-2.0, 0.0], [11.0, -2.5]])
PHI1 = exosystem_matrix([0.1])
PSI1 = np.array([10.0, 0.0])


def _spec(ell=2):
    Phi = exosystem_matrix([0.1], [0.2][: ell - 1])
    return InternalModelSpec.build(default_M(ell), np.ones(2 * ell), Phi, [10.0, 0.0] * ell, 1, ell - 1)


def test_sylvester_against_fixed_point_oracle():
    T = solve_sylvester(PHI1, M2, [1.0, 1.0], PSI1)
    assert sylvester_residual(T, PHI1, M2, [1.0, 1.0], PSI1) < 1e-10
    assert abs(np.linalg.det(T)) > 0
    # independent oracle: M is Hurwitz and Phi is neutral, so
    # T = int_0^inf e^{Ms} N Psi e^{-Phi s} ds, evaluated by quadrature
    from scipy.integrate import quad_vec
    from scipy.linalg import expm

    NP = np.outer([1.0, 1.0], PSI1)
    T_q, _ = quad_vec(lambda s: expm(M2 * s) @ NP @ expm(-PHI1 * s), 0, 60, epsabs=1e-12)
    assert np.allclose(T, T_q, atol=1e-8)


def test_zero_output_row_is_singular():
    with pytest.warns(ObservabilityWarning):
        T = solve_sylvester(PHI1, M2, [1.0, 1.0], [0.0, 0.0])
    assert np.all(T == 0)
    with pytest.raises(ConfigurationError), pytest.warns(ObservabilityWarning):
        InternalModelSpec.build(M2, [1.0, 1.0], PHI1, [0.0, 0.0], 1, 0)


def test_overlapping_spectra_rejected():
    with pytest.raises(ConfigurationError):
        solve_sylvester(PHI1, PHI1, [1.0, 1.0], PSI1)


def test_observability():
    assert check_observability(PSI1, PHI1)
    assert not check_observability([0.0, 0.0], PHI1)
    twin = exosystem_matrix([0.1, 0.1])
    assert not check_observability([10.0, 0.0, 0.0, 0.0], twin)
    assert check_controllability(M2, [1.0, 1.0])
    assert not check_controllability(np.diag([-1.0, -1.0]), [1.0, 1.0])


def test_split_psi():
    a, b = split_psi([10, 0, 0, 0], 1, 1)
    assert np.array_equal(a, [10, 0, 0, 0]) and np.array_equal(b, [0, 0, 0, 0])
    a, b = split_psi([0, 0, 10, 0], 1, 1)
    assert np.array_equal(a, [0, 0, 0, 0]) and np.array_equal(b, [0, 0, 10, 0])
    with pytest.raises(ValueError):
        split_psi([1, 2, 3], 1, 1)


def test_design_matrices_are_hurwitz():
    for ell in (1, 2, 3):
        for M in (default_M(ell), symmetric_M(ell)):
            assert np.max(np.linalg.eigvals(M).real) < 0
            assert check_controllability(M, np.ones(2 * ell))


def test_target_dynamics_identity():
    s = _spec()
    # vartheta = T chi obeys vartheta' = G vartheta
    chi = np.array([0.3, -1.0, 2.0, 0.5])
    lhs = s.T_star @ (s.Phi @ chi)
    assert np.allclose(lhs, s.G @ (s.T_star @ chi), atol=1e-10 * np.abs(lhs).max())


def test_internal_model_on_target_has_no_error_drift():
    s = _spec()
    chi = np.array([0.0, 3.0, 0.0, 8.0])
    th = s.T_star @ chi
    drive = s.Psi @ chi
    err = internal_model_rhs(th, drive, s.M, s.N) - s.T_star @ s.Phi @ chi
    assert np.linalg.norm(err) < 1e-10 * max(1.0, np.abs(th).max())
    assert np.all(internal_model_rhs(np.zeros(4), 0.0, s.M, s.N) == 0)


def test_unforced_decay_rate():
    M = default_M(1)
    dt, x, ts, ns = 1e-2, np.array([1.0, 1.0]), [], []
    for n in range(1500):
        ts.append(n * dt)
        ns.append(np.linalg.norm(x))
        x = rk4_step(lambda t, e: internal_model_rhs(e, 0.0, M, np.ones(2)), x, n * dt, dt)
    ts, ns = np.array(ts), np.array(ns)
    k = ts > 5
    rate = -np.polyfit(ts[k], np.log(ns[k]), 1)[0]
    assert rate == pytest.approx(-np.max(np.linalg.eigvals(M).real), rel=0.1)


def test_reconstruction_matches_exosystem_output():
    s = _spec()
    for chi in (np.array([0.0, 3.0, 0.0, 8.0]), np.array([1.0, -2.0, 0.5, 0.1])):
        eta = s.T_star @ chi
        assert abs(reconstruct_ren(s, eta, "both") - s.Psi @ chi) < 1e-9
        assert abs(reconstruct_ren(s, eta, "low") - s.Psi1 @ chi) < 1e-9
        assert abs(reconstruct_ren(s, eta, "medium") - s.Psi2 @ chi) < 1e-9
    assert reconstruct_ren(s, np.zeros(4)) == 0.0
    with pytest.raises(ValueError):
        reconstruct_ren(s, np.zeros(4), "high")


def test_spec_is_immutable():
    s = _spec(1)
    with pytest.raises(ValueError):
        s.T_star[0, 0] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert s.residual < 1e-10
