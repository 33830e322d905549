"""Local internal models of the wind exosystem.

The internal model ``eta' = M eta + N drive`` is a Hurwitz copy of the
exosystem. With ``T`` the solution of ``T Phi - M T = N Psi`` the hidden
target ``vartheta = T chi`` obeys ``vartheta' = (M + N Psi T^-1) vartheta``,
and ``Psi T^-1 eta`` reconstructs the wind signal once ``eta`` has locked on.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla

COND_LIMIT = 1e12


class ConfigurationError(ValueError):
    """Internal-model data that cannot produce a valid design."""


class ObservabilityWarning(UserWarning):
    pass


def oscillator_block(rho: float) -> np.ndarray:
    return np.array([[0.0, 1.0], [-rho * rho, 0.0]])


def exosystem_matrix(rho_low, rho_med=()) -> np.ndarray:
    """Block-diagonal exosystem matrix, low-frequency blocks first."""
    blocks = [oscillator_block(r) for r in list(rho_low) + list(rho_med)]
    if not blocks:
        return np.zeros((0, 0))
    return sla.block_diag(*blocks)


def _kron_solve(Phi, M, rhs):
    n, p = M.shape[0], Phi.shape[0]
    # column-major vec: vec(T Phi) = (Phi^T kron I) vec T, vec(M T) = (I kron M) vec T
    K = np.kron(Phi.T, np.eye(n)) - np.kron(np.eye(p), M)
    try:
        x = np.linalg.solve(K, rhs.reshape(-1, order="F"))
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("Sylvester system is singular (spectra of M and Phi overlap)") from exc
    if np.linalg.cond(K) > 1e14:
        raise ConfigurationError("Sylvester system is singular (spectra of M and Phi overlap)")
    return x.reshape((n, p), order="F")


def solve_sylvester(Phi, M, N, Psi) -> np.ndarray:
    """Solve ``T Phi - M T = N Psi`` through its Kronecker-vectorized form.

    Warns with :class:`ObservabilityWarning` when the solution is singular
    or badly conditioned, which happens exactly when ``(Psi, Phi)`` is not
    observable.
    """
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    M = np.atleast_2d(np.asarray(M, dtype=float))
    N = np.asarray(N, dtype=float).reshape(-1, 1)
    Psi = np.asarray(Psi, dtype=float).reshape(1, -1)
    if M.shape[0] != N.shape[0] or Phi.shape[0] != Psi.shape[1]:
        raise ConfigurationError("Sylvester dimension mismatch")
    T = _kron_solve(Phi, M, N @ Psi)
    if np.linalg.cond(T) > COND_LIMIT:
        warnings.warn("Sylvester solution is numerically singular: (Psi, Phi) is not observable",
                      ObservabilityWarning, stacklevel=2)
    return T


def sylvester_residual(T, Phi, M, N, Psi) -> float:
    N = np.asarray(N, dtype=float).reshape(-1, 1)
    Psi = np.asarray(Psi, dtype=float).reshape(1, -1)
    return float(np.linalg.norm(T @ Phi - M @ T - N @ Psi, "fro"))


def _rank(A, rtol=1e-10) -> int:
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def check_observability(Psi, Phi) -> bool:
    Psi = np.asarray(Psi, dtype=float).reshape(1, -1)
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    n = Phi.shape[0]
    if Psi.shape[1] != n:
        raise ValueError("dimension mismatch between Psi and Phi")
    rows = [Psi]
    for _ in range(n - 1):
        rows.append(rows[-1] @ Phi)
    return _rank(np.vstack(rows)) == n


def check_controllability(M, N) -> bool:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    N = np.asarray(N, dtype=float).reshape(-1, 1)
    cols = [N]
    for _ in range(M.shape[0] - 1):
        cols.append(M @ cols[-1])
    return _rank(np.hstack(cols)) == M.shape[0]


def split_psi(Psi, ell_L: int, ell_M: int):
    """Split ``Psi`` into its low-band and medium-band rows."""
    Psi = np.asarray(Psi, dtype=float).ravel()
    if Psi.size != 2 * (ell_L + ell_M):
        raise ValueError(f"Psi has length {Psi.size}, expected {2 * (ell_L + ell_M)}")
    psi1 = np.zeros_like(Psi)
    psi2 = np.zeros_like(Psi)
    psi1[: 2 * ell_L] = Psi[: 2 * ell_L]
    psi2[2 * ell_L:] = Psi[2 * ell_L:]
    return psi1, psi2


def default_M(ell: int) -> np.ndarray:
    """Lower-triangular Hurwitz matrix used when a scenario gives none."""
    if ell == 1:
        return np.array([[-2.0, 0.0], [11.0, -2.5]])
    if ell == 2:
        return np.array([[-2.0, 0, 0, 0], [11.0, -2.5, 0, 0], [4.0, -1.0, -3.0, 0], [-6.0, 5.0, 1.0, -3.5]])
    n = 2 * ell
    M = np.diag(-2.0 - 0.5 * np.arange(n))
    M[np.arange(1, n), np.arange(n - 1)] = 1.0
    return M


def symmetric_M(ell: int) -> np.ndarray:
    """Diagonal Hurwitz matrix with distinct entries; controllable with ones.

    Its symmetric part is negative definite, so ``|eta|^2`` is a Lyapunov
    function of the unforced internal model.
    """
    return -np.diag(2.0 + 0.5 * np.arange(2 * ell))


@dataclass(frozen=True, eq=False)
class InternalModelSpec:
    """Hurwitz pair ``(M, N)`` together with the Sylvester solution.

    ``Psi`` is the exosystem output row; ``Phi`` is kept for oracles. Built
    through :meth:`build`, which checks every structural invariant.
    """

    M: np.ndarray
    N: np.ndarray
    Phi: np.ndarray
    Psi: np.ndarray
    Psi1: np.ndarray
    Psi2: np.ndarray
    T_star: np.ndarray
    T_star_inv: np.ndarray
    ell_L: int
    ell_M: int

    @classmethod
    def build(cls, M, N, Phi, Psi, ell_L: int, ell_M: int) -> "InternalModelSpec":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        N = np.asarray(N, dtype=float).ravel()
        Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
        Psi = np.asarray(Psi, dtype=float).ravel()
        n = 2 * (ell_L + ell_M)
        if M.shape != (n, n) or N.size != n or Phi.shape != (n, n) or Psi.size != n:
            raise ConfigurationError(
                f"internal model dimensions: M {M.shape}, N {N.size}, Phi {Phi.shape}, Psi {Psi.size}; need {n}")
        if not np.max(np.linalg.eigvals(M).real) < 0:
            raise ConfigurationError("M is not Hurwitz")
        if not check_controllability(M, N):
            raise ConfigurationError("(M, N) is not controllable")
        T = solve_sylvester(Phi, M, N, Psi)
        if np.linalg.cond(T) > COND_LIMIT:
            raise ConfigurationError("Sylvester solution is singular: (Psi, Phi) is not observable")
        psi1, psi2 = split_psi(Psi, ell_L, ell_M)
        for a in (M, N, Phi, Psi, psi1, psi2, T):
            a.setflags(write=False)
        Tinv = np.linalg.inv(T)
        Tinv.setflags(write=False)
        return cls(M, N, Phi, Psi, psi1, psi2, T, Tinv, ell_L, ell_M)

    @property
    def ell(self) -> int:
        return self.ell_L + self.ell_M

    @property
    def residual(self) -> float:
        return sylvester_residual(self.T_star, self.Phi, self.M, self.N, self.Psi)

    @cached_property
    def G(self) -> np.ndarray:
        """Generator of the target dynamics, ``M + N Psi T^-1``."""
        return self.M + np.outer(self.N, self.Psi @ self.T_star_inv)

    @cached_property
    def rows(self) -> dict[str, np.ndarray]:
        """Reconstruction rows acting on ``eta``.

        ``low``, ``low_d``, ``low_dd`` give the low-band signal and its first
        two time derivatives, ``med`` and ``med_d`` the medium band, ``all``
        the full signal.
        """
        S, G = self.T_star_inv, self.G
        r = {
            "low": self.Psi1 @ S,
            "med": self.Psi2 @ S,
            "all": self.Psi @ S,
        }
        r["low_d"] = r["low"] @ G
        r["low_dd"] = r["low_d"] @ G
        r["med_d"] = r["med"] @ G
        r["all_d"] = r["all"] @ G
        for v in r.values():
            v.setflags(write=False)
        return r


def internal_model_rhs(eta, drive, M, N):
    """``eta' = M eta + N drive``; ``eta`` may carry a trailing batch axis."""
    eta = np.asarray(eta, dtype=float)
    N = np.asarray(N, dtype=float)
    if eta.ndim == 1:
        return M @ eta + N * drive
    return M @ eta + np.outer(N, drive)


def generator_drive(P_M, P_E, P_IE, flows_star, D, w_star):
    return -P_M + P_E + P_IE + flows_star + D * w_star


def load_drive(P_E, P_IE, flows_star, D, w_star):
    return P_E + P_IE + flows_star + D * w_star


def reconstruct_ren(spec: InternalModelSpec, eta, which: str = "both"):
    """Wind power estimate ``Psi_k T^-1 eta`` for one band or both."""
    key = {"low": "low", "medium": "med", "both": "all"}.get(which)
    if key is None:
        raise ValueError(f"which must be 'low', 'medium' or 'both', got {which!r}")
    return spec.rows[key] @ np.asarray(eta, dtype=float)
