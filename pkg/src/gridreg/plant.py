"""Right-hand sides of the physical subsystems and a fixed-step integrator.

All functions are pure and accept numpy arrays, so the same code evaluates
one bus or a whole batch of buses (leading axis) at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


class IntegrationError(RuntimeError):
    """Non-finite state or derivative during time stepping."""

    def __init__(self, message: str, time: float | None = None, bus: int | None = None,
                 index: int | None = None):
        super().__init__(message)
        self.time = time
        self.bus = bus
        self.index = index


def gen4_rhs(state, flows_sum, P_L, P_ren, P_ref, params):
    """Fourth-order synchronous generator.

    Parameters
    ----------
    state : array_like, shape (4,) or (4, n)
        ``(theta, w, P_M, P_v)``.
    flows_sum : float or ndarray
        Net tie-line export ``sum_j P_ij``.
    P_L, P_ren, P_ref : float or ndarray
        Total load, renewable injection and governor reference.
    params : BusParams or object with ``m, D, T_CH, T_G, R``

    Returns
    -------
    ndarray
        Time derivative with the same shape as ``state``.
    """
    th, w, pm, pv = state
    p = params
    return np.array([
        TWO_PI * w,
        -(p.D * w + flows_sum - pm + P_L - P_ren) / p.m,
        -(pm - pv) / p.T_CH,
        -(pv + w / p.R - P_ref) / p.T_G,
    ])


def gen3_rhs(state, flows_sum, P_L, P_ren, P_v, params):
    """Third-order generator; the valve power ``P_v`` is an input."""
    th, w, pm = state
    p = params
    return np.array([
        TWO_PI * w,
        -(p.D * w + flows_sum - pm + P_L - P_ren) / p.m,
        -(pm - P_v) / p.T_CH,
    ])


def loadbus_rhs(state, flows_sum, P_L, P_ren, params, w_ref=0.0):
    """Load or passive bus swing dynamics (passive: ``P_L = P_ren = 0``).

    ``w_ref`` shifts the damping term to ``D (w - w_ref)``; the network
    uses ``w_ref = w*`` at passive buses so that the desired angles are an
    equilibrium.
    """
    th, w = state
    p = params
    return np.array([TWO_PI * w, -(p.D * (w - w_ref) + flows_sum + P_L - P_ren) / p.m])


def demand_rhs(P_E, lam, b, c):
    """Elastic demand driven by the price signal ``lam``."""
    return b + c * P_E - lam


def exosystem_rhs(chi, Phi):
    chi = np.asarray(chi, dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    if Phi.shape != (chi.shape[0], chi.shape[0]):
        raise ValueError(f"exosystem dimension mismatch: Phi {Phi.shape}, chi {chi.shape}")
    return Phi @ chi


def exo_output(Psi, chi):
    Psi = np.asarray(Psi, dtype=float)
    chi = np.asarray(chi, dtype=float)
    if Psi.shape[-1] != chi.shape[0]:
        raise ValueError(f"exosystem dimension mismatch: Psi {Psi.shape}, chi {chi.shape}")
    return Psi @ chi


def wind_power_from_speed(v, rho_air=1.225, r=40.0, C_p=0.4):
    """Turbine output ``C_p * rho_air * pi * r^2 * v^3 / 2``, in MW (SI inputs)."""
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ValueError("wind speed must be non-negative")
    watts = C_p * 0.5 * rho_air * math.pi * r**2 * v**3
    out = watts * 1e-6
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BessState:
    y: float
    T: float = 1.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("BESS time constant must be positive")


def bess_rhs(state: BessState, u):
    """First-order low-pass realization of ``1 / (1 + sT)``."""
    return (u - state.y) / state.T


def bess_gain(omega, T):
    """Steady-state magnitude of the BESS filter at ``omega`` rad/s."""
    return 1.0 / np.sqrt(1.0 + (np.asarray(omega) * T) ** 2)


def rk4_step(rhs, state, t, dt):
    """Classical fourth-order Runge-Kutta step of ``x' = rhs(t, x)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    k1 = rhs(t, state)
    k2 = rhs(t + 0.5 * dt, state + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, state + 0.5 * dt * k2)
    k4 = rhs(t + dt, state + dt * k3)
    out = state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(np.atleast_1d(out)))[0])
        raise IntegrationError(f"non-finite state component {bad} at t={t + dt:.6g}", time=t + dt, index=bad)
    return out
