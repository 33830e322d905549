"""Unknown-frequency controller on the third-order generator model.

The controller has the same structure as the robust one, with the unknown
``T^-1`` replaced by an online estimate ``That`` whose rows follow a
projected gradient law. The projection keeps every ``psi_k * That[k, l]``
inside ``[-B/|N|, B/|N|]`` with ``B = (rho_max^2 + 1) l + |M|_F``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import BusParams
from .internal_model import ConfigurationError, InternalModelSpec, check_controllability, symmetric_M
from .local import LocalBus, LocalView, raw_columns
from .robust import BusBatch, Design, _dot

TWO_PI = 2.0 * math.pi


def sign_alpha(alpha, b):
    """Dead-zone sign: 1 if ``b >= alpha``, -1 if ``b <= -alpha``, else 0."""
    b = np.asarray(b, dtype=float)
    return np.where(b >= alpha, 1.0, np.where(b <= -alpha, -1.0, 0.0))


def bound_B(M, ell: int, rho_max: float) -> float:
    return (rho_max**2 + 1.0) * ell + float(np.linalg.norm(np.asarray(M, dtype=float), "fro"))


def derive_s2(k, params: BusParams, sum_t: float) -> dict:
    k1, k2 = float(k[0]), float(k[1])
    m, D = params.m, params.D
    return {
        "e_M1": m / TWO_PI * k1**2 - D / TWO_PI * k1 + sum_t,
        "e_M2": D / TWO_PI - m / TWO_PI * (k1 + k2),
    }


@dataclass(frozen=True)
class GainSet2:
    kind: str
    k: tuple[float, ...]
    delta: float | None = None
    alpha: float | None = None
    coeffs: dict = field(default_factory=dict)

    @classmethod
    def build(cls, bus: LocalBus, k, delta=None, alpha=None) -> "GainSet2":
        k = tuple(float(x) for x in k)
        need = {"G": 4, "L": 3}[bus.kind]
        if len(k) != need:
            raise ValueError(f"bus {bus.id}: expected {need} gains, got {len(k)}")
        if not all(x > 0 for x in k):
            raise ValueError(f"bus {bus.id}: gains must be positive")
        return cls(bus.kind, k, delta, alpha, derive_s2(k, bus.params, bus.sum_t))

    def __getattr__(self, name):
        c = self.__dict__.get("coeffs", {})
        if name in c:
            return c[name]
        raise AttributeError(name)


@dataclass(frozen=True)
class AdaptiveState:
    """Estimate of ``T^-1`` for one bus together with its projection data."""

    T_inv: np.ndarray
    gamma: float
    B_M: float
    N_norm: float

    @property
    def box(self) -> float:
        return self.B_M / self.N_norm

    def in_box(self, Psi, tol=1e-9) -> bool:
        return bool(np.all(np.abs(np.asarray(Psi)[:, None] * self.T_inv) <= self.box + tol))


def estimator_rhs(T_inv, J, Psi, gamma: float, box: float):
    """Row-wise projected update of the ``T^-1`` estimate.

    Works on one bus (``T_inv`` of shape ``(p, p)``) or a batch
    (``(n, p, p)`` with ``J``, ``Psi`` of shape ``(n, p)`` and ``box``
    of shape ``(n,)``).
    """
    T_inv = np.asarray(T_inv, dtype=float)
    J = np.asarray(J, dtype=float)
    Psi = np.asarray(Psi, dtype=float)
    if T_inv.ndim == 2:
        return estimator_rhs(T_inv[None], J[None], Psi[None], gamma, np.atleast_1d(box))[0]
    box = np.asarray(box, dtype=float).reshape(-1, 1, 1)
    jn = np.linalg.norm(J, axis=1)[:, None, None]
    psi = Psi[:, :, None]
    return psi * (J[:, None, :] - (jn + gamma) * sign_alpha(box, psi * T_inv))


def project_box(T_inv, Psi, box):
    """Clamp ``psi_k * T_inv[k, l]`` into the projection box (batch form)."""
    psi = np.asarray(Psi)[:, :, None]
    box = np.asarray(box, dtype=float).reshape(-1, 1, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lim = np.where(psi != 0, box / np.abs(psi), np.inf)
    return np.clip(T_inv, -lim, lim)


class S2Group(BusBatch):
    """Solution-2 control law for a batch of same-kind buses.

    ``raw`` columns follow :func:`raw_columns` with ``solution='adaptive'``,
    ``That`` is ``(n, 2l, 2l)``.
    """

    def __init__(self, buses: list[LocalBus], gains: list[GainSet2], gamma: float, rho_max):
        super().__init__(buses)
        if self.kind not in ("G", "L"):
            raise ValueError("passive buses carry no controller")
        self.k = np.array([g.k for g in gains])
        self.e_M1 = np.array([g.e_M1 for g in gains])
        self.e_M2 = np.array([g.e_M2 for g in gains])
        self.gamma = float(gamma)
        rho_max = np.broadcast_to(np.asarray(rho_max, dtype=float), (self.n,))
        self.B = np.array([bound_B(M, self.ell, r) for M, r in zip(self.M, rho_max)])
        self.N_norm = np.linalg.norm(self.N, axis=1) if self.ell else np.ones(self.n)
        self.box = self.B / self.N_norm

    def rows_hat(self, That):
        """Reconstruction rows built from the current estimate."""
        low = np.einsum("nj,njk->nk", self.Psi1, That)
        med = np.einsum("nj,njk->nk", self.Psi2, That)
        full = low + med
        G = self.M + np.einsum("nj,nk->njk", self.N, full)
        low_d = np.einsum("nj,njk->nk", low, G)
        med_d = np.einsum("nj,njk->nk", med, G)
        return {"low": low, "med": med, "all": full, "low_d": low_d, "med_d": med_d,
                "all_d": low_d + med_d}

    def manifolds(self, eta, That, sig) -> dict:
        IE, IE1, _ = sig
        r = {key: _dot(v, eta) for key, v in self.rows_hat(That).items()}
        ws = self.w_star
        if self.kind == "G":
            base = IE - r["low"] + self.D * ws + self.fs
            return {
                "P_M": base,
                "P_v": self.T_CH * (IE1 - r["low_d"]) + base,
                "P_E": r["med"],
                "lam": -r["med_d"] + self.c * r["med"] + self.b,
            }
        L = r["all"] - IE - self.D * ws - self.fs
        return {"P_E": L, "lam": -r["all_d"] + IE1 + self.b + self.c * L}

    def hat(self, raw, eta, That, sig, man=None):
        man = self.manifolds(eta, That, sig) if man is None else man
        k = self.k
        x1 = raw[:, 0] - self.theta_star
        x2 = TWO_PI * (raw[:, 1] - self.w_star) + k[:, 0] * x1
        if self.kind == "G":
            x4 = raw[:, 3] - man["P_E"]
            x3 = raw[:, 2] - man["P_M"] - (self.e_M1 * x1 + self.e_M2 * x2 + x4)
            return np.stack([x1, x2, x3, x4], axis=1)
        x3 = raw[:, 2] - man["P_E"] + (self.e_M1 * x1 + self.e_M2 * x2)
        return np.stack([x1, x2, x3], axis=1)

    def hat_eta(self, raw, eta, target):
        return eta - target + (self.m * (raw[:, 1] - self.w_star))[:, None] * self.N

    def feedback(self, xh):
        k, c, e1, e2 = self.k, self.c, self.e_M1, self.e_M2
        if self.kind == "G":
            x1, x2, x3, x4 = xh.T
            T = self.T_CH
            p_v = (e1 * (1 - T * k[:, 0]) * x1 + (T * e1 + (1 - T * k[:, 1]) * e2) * x2
                   + (1 + TWO_PI / self.m * T * e2 - T * k[:, 2]) * x3 + (1 - T * k[:, 3]) * x4)
            return p_v, (c + k[:, 3]) * x4
        x1, x2, x3 = xh.T
        lam = (-e1 * (c + k[:, 0]) * x1 + (e1 - e2 * (c + k[:, 1])) * x2
               + (c + k[:, 2] - e2 / self.m) * x3)
        return (lam,)

    def J(self, xh, eta):
        sgn = -1.0 if self.kind == "G" else 1.0
        return (TWO_PI / self.m * (xh[:, 1] + sgn * self.e_M2 * xh[:, 2]))[:, None] * eta

    def step(self, raw, eta, That, sig):
        """Inputs and estimator derivative at one instant."""
        man = self.manifolds(eta, That, sig)
        xh = self.hat(raw, eta, That, sig, man)
        fb = self.feedback(xh)
        dT = estimator_rhs(That, self.J(xh, eta), self.Psi, self.gamma, self.box)
        if self.kind == "G":
            return (man["P_v"] + fb[0], man["lam"] + fb[1]), dT
        return (man["lam"] + fb[0],), dT


# -- single-bus API -----------------------------------------------------------

def _sig(view: LocalView):
    return tuple(np.array([v]) for v in view.demand())


def hat_transform_s2(view: LocalView, gains: GainSet2, That, target=None, rho_max=None, gamma=0.1):
    bus = view.bus
    g = S2Group([bus], [gains], gamma, 0.0 if rho_max is None else rho_max)
    raw = view.raw(raw_columns(bus.kind, "adaptive"))[None, :]
    eta = view.eta.reshape(1, -1)
    xh = g.hat(raw, eta, np.asarray(That)[None], _sig(view))[0]
    if target is None:
        return xh
    return np.concatenate([xh, g.hat_eta(raw, eta, np.asarray(target).reshape(1, -1))[0]])


def control_law_s2(view: LocalView, gains: GainSet2, That, rho_max: float, gamma: float = 0.1):
    """``((P_v, lam) or (lam,), dThat)`` at one bus."""
    bus = view.bus
    g = S2Group([bus], [gains], gamma, rho_max)
    raw = view.raw(raw_columns(bus.kind, "adaptive"))[None, :]
    u, dT = g.step(raw, view.eta.reshape(1, -1), np.asarray(That)[None], _sig(view))
    return tuple(float(x[0]) for x in u), dT[0]


# -- gain design ----------------------------------------------------------------

def alg2_k1(ell: int, m: float, neighbors: dict, neighbor_m: dict, delta: float) -> float:
    r = math.sqrt(2 * ell)
    return 1.5 + r + math.pi / m + sum(t * (TWO_PI / neighbor_m[j] + r) for j, t in neighbors.items()) + delta


def alg2_terms(k1, ell, p: BusParams, sum_t, M, alpha, B, delta):
    """Gains two and three of the adaptive design, given ``k1`` and ``alpha``."""
    r = math.sqrt(2 * ell)
    mMD = float(np.linalg.norm(p.m * M + p.D * np.eye(2 * ell), 2))
    k2 = (delta + (1 + r) / 2 + math.pi / p.m * sum_t + B + k1**2 * B**2 / (2 * r)
          + math.pi * B**2 / (2 * p.m * alpha**2 * ell**2) + alpha / (4 * math.pi) * mMD)
    e2 = derive_s2((k1, k2), p, sum_t)["e_M2"]
    k3 = (e2**2 * math.pi / p.m * sum_t + math.pi / p.m + e2**2 * B**2 / (2 * r)
          + k1**2 * e2**2 * B**2 / (2 * r))
    return k2, k3


def alg2_p2(k1, ell, p: BusParams, sum_t, M, alpha, B, e_M2, terms: bool = False):
    """The second bound used in the existence argument, with its listed weights.

    With ``terms=True`` the individual summands are returned instead of
    their total.
    """
    r = math.sqrt(2 * ell)
    mMDC = float(np.linalg.norm((p.m * M + p.D * np.eye(2 * ell)) @ (np.ones(2 * ell) / r)))
    b1 = k1 * B / r
    b2 = r * alpha / B
    b4 = e_M2 * B / r
    parts = [0.5, B / 2 * b1 * k1, B / 2 * e_M2 / b4, math.pi / p.m * sum_t,
             math.pi * B / (r * p.m * alpha * b2), alpha / (4 * math.pi) * mMDC, B]
    return parts if terms else sum(parts)


def design_gains_alg2(scenario, delta: float | None = None) -> dict[int, Design]:
    """Local gain and internal-model design for the adaptive controller."""
    from .internal_model import InternalModelSpec as IMS

    delta = scenario.delta if delta is None else float(delta)
    if not delta > 0:
        raise ValueError("delta must be positive")
    topo = scenario.topology
    out: dict[int, Design] = {}
    for desc in scenario.buses:
        if not desc.controlled:
            continue
        if desc.wind is None:
            raise ConfigurationError(f"bus {desc.id}: the adaptive design needs a wind exosystem")
        p = desc.params
        ell = desc.wind.ell
        st = topo.stiffness_sum(desc.id)
        nbrs = topo.neighbors(desc.id)
        k1 = alg2_k1(ell, p.m, nbrs, {j: topo.bus(j).params.m for j in nbrs}, delta)
        im = desc.internal_model or {}
        M = np.asarray(im["design_M"], dtype=float) if "design_M" in im else symmetric_M(ell)
        C = np.asarray(im["C"], dtype=float) if "C" in im else np.ones(2 * ell)
        Cn = C / np.linalg.norm(C)
        if not check_controllability(M, Cn):
            raise ConfigurationError(f"bus {desc.id}: (M, C) is not controllable")
        mMD = float(np.linalg.norm(p.m * M + p.D * np.eye(2 * ell), 2))
        alpha = min(1.0, 4 * math.pi / ((k1 + 1) * mMD))
        spec = IMS.build(M, alpha * Cn, desc.wind.Phi, desc.wind.Psi, desc.wind.ell_L, desc.wind.ell_M)
        B = bound_B(M, ell, desc.wind.rho_ceiling)
        k2, k3 = alg2_terms(k1, ell, p, st, M, alpha, B, delta)
        k = (k1, k2, k3, delta) if desc.kind == "G" else (k1, k2, k3)
        bus = LocalBus.from_topology(topo, desc.id, scenario.setpoint_hz, spec)
        out[desc.id] = Design(GainSet2.build(bus, k, delta, alpha), spec, bus)
    return out
