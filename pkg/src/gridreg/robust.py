"""Known-frequency internal-model controller.

Each controlled bus subtracts the wind-dependent manifolds, evaluated with
the internal-model estimate ``Psi T^-1 eta``, from its measured state and
adds backstepping terms so that the closed loop becomes linear and
time-invariant in the transformed ("hat") coordinates.

The heavy lifting lives in :class:`S1Group`, which evaluates the control
law for a batch of buses of the same kind at once. The single-bus
functions wrap it with a batch of one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import BusParams
from .internal_model import InternalModelSpec, check_controllability, symmetric_M
from .local import LocalBus, LocalView, raw_columns

TWO_PI = 2.0 * math.pi


def _psi_s_n(spec: InternalModelSpec | None) -> float:
    if spec is None:
        return 0.0
    return float(spec.rows["all"] @ spec.N)


def derive_s1(kind: str, k, params: BusParams, sum_t: float, spec: InternalModelSpec | None) -> dict:
    """Backstepping coefficients for the given gains.

    Returns ``e_M1, e_M2`` for every controlled bus and ``e_v1..e_v3`` for
    generators.
    """
    k = tuple(float(x) for x in k)
    m, D = params.m, params.D
    q = D - m * _psi_s_n(spec) - m * k[0]
    out = {"e_M1": sum_t - k[0] / TWO_PI * q, "e_M2": q - m * k[1]}
    if kind == "G":
        T = params.T_CH
        e1, e2 = out["e_M1"], out["e_M2"]
        out["e_v1"] = e1 * (1 - T * k[0])
        out["e_v2"] = TWO_PI * T * e1 + e2 - T * k[1] * e2
        out["e_v3"] = 1 + e2 * T / m - T * k[2]
    return out


def e_eta(k1: float, params: BusParams, sum_t: float, M, N) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three coupling vectors used to scale ``N``."""
    M = np.asarray(M, dtype=float)
    N = np.asarray(N, dtype=float)
    m, D = params.m, params.D
    I = np.eye(M.shape[0])
    e1 = (m * k1 / TWO_PI * M + (D * k1 / TWO_PI + sum_t) * I) @ N
    e2 = -(m * M + D * I) @ N
    e3 = N * sum_t
    return e1, e2, e3


@dataclass(frozen=True)
class GainSet1:
    kind: str
    k: tuple[float, ...]
    delta: float | None = None
    alpha: float | None = None
    coeffs: dict = field(default_factory=dict)

    @classmethod
    def build(cls, bus: LocalBus, k, delta=None, alpha=None) -> "GainSet1":
        k = tuple(float(x) for x in k)
        need = {"G": 5, "L": 3}[bus.kind]
        if len(k) != need:
            raise ValueError(f"bus {bus.id}: expected {need} gains, got {len(k)}")
        if not all(x > 0 for x in k):
            raise ValueError(f"bus {bus.id}: gains must be positive")
        return cls(bus.kind, k, delta, alpha, derive_s1(bus.kind, k, bus.params, bus.sum_t, bus.spec))

    def __getattr__(self, name):
        c = self.__dict__.get("coeffs", {})
        if name in c:
            return c[name]
        raise AttributeError(name)

    def consistent_with(self, bus: LocalBus) -> bool:
        return derive_s1(self.kind, self.k, bus.params, bus.sum_t, bus.spec) == self.coeffs


def _stack(vals, n, width):
    if width == 0:
        return np.zeros((n, 0))
    return np.array(vals, dtype=float).reshape(n, width)


class BusBatch:
    """Stacked per-bus constants shared by both controllers."""

    def __init__(self, buses: list[LocalBus]):
        kinds = {b.kind for b in buses}
        ells = {b.ell for b in buses}
        if len(kinds) != 1 or len(ells) != 1:
            raise ValueError("a batch needs buses of one kind and one internal-model size")
        self.buses = buses
        self.kind = kinds.pop()
        self.ell = ells.pop()
        self.n = n = len(buses)
        p = [b.params for b in buses]
        f = lambda name: np.array([getattr(x, name) if getattr(x, name) is not None else np.nan for x in p])
        self.m, self.D = f("m"), f("D")
        self.T_CH, self.T_G, self.R = f("T_CH"), f("T_G"), f("R")
        self.b = np.array([x.b if x.has_demand_response else np.nan for x in p])
        self.c = np.array([x.c if x.has_demand_response else np.nan for x in p])
        self.sum_t = np.array([b.sum_t for b in buses])
        self.fs = np.array([b.flows_star for b in buses])
        self.theta_star = np.array([b.theta_star for b in buses])
        self.w_star = buses[0].w_star
        w = 2 * self.ell
        specs = [b.spec for b in buses]
        if self.ell:
            self.M = np.array([s.M for s in specs])
            self.N = np.array([s.N for s in specs])
            self.Psi = np.array([s.Psi for s in specs])
            self.Psi1 = np.array([s.Psi1 for s in specs])
            self.Psi2 = np.array([s.Psi2 for s in specs])
            self.S = np.array([s.T_star_inv for s in specs])
            self.T_star = np.array([s.T_star for s in specs])
        else:
            self.M = np.zeros((n, 0, 0))
            self.S = self.T_star = np.zeros((n, 0, 0))
            self.N = self.Psi = self.Psi1 = self.Psi2 = np.zeros((n, 0))
        self.rows = {key: _stack([s.rows[key] for s in specs] if self.ell else [], n, w)
                     for key in ("low", "low_d", "low_dd", "med", "med_d", "all", "all_d")}


def _dot(rows, eta):
    return np.einsum("ij,ij->i", rows, eta)


class S1Group(BusBatch):
    """Solution-1 control law for a batch of same-kind buses.

    Array arguments carry the bus index on axis 0: ``raw`` is ``(n, ncol)``
    with the columns of :func:`raw_columns`, ``eta`` is ``(n, 2l)`` and
    ``sig`` is the tuple ``(P_IE, P_IE', P_IE'')`` of ``(n,)`` arrays.
    """

    def __init__(self, buses: list[LocalBus], gains: list[GainSet1]):
        super().__init__(buses)
        if self.kind not in ("G", "L"):
            raise ValueError("passive buses carry no controller")
        self.k = np.array([g.k for g in gains])
        for name in ("e_M1", "e_M2") + (("e_v1", "e_v2", "e_v3") if self.kind == "G" else ()):
            setattr(self, name, np.array([g.coeffs[name] for g in gains]))

    # -- manifolds --------------------------------------------------------
    def manifolds(self, eta, sig) -> dict:
        IE, IE1, IE2 = sig
        r = {key: _dot(v, eta) for key, v in self.rows.items()}
        ws = self.w_star
        if self.kind == "G":
            base = IE - r["low"] + self.D * ws + self.fs
            d1 = IE1 - r["low_d"]
            d2 = IE2 - r["low_dd"]
            return {
                "P_M": base,
                "P_v": self.T_CH * d1 + base,
                "P_ref": self.T_G * self.T_CH * d2 + (self.T_G + self.T_CH) * d1 + base + ws / self.R,
                "P_E": r["med"],
                "lam": -r["med_d"] + self.c * r["med"] + self.b,
            }
        L = r["all"] - IE - self.D * ws - self.fs
        return {"P_E": L, "lam": -r["all_d"] + IE1 + self.b + self.c * L}

    # -- transformation ---------------------------------------------------
    def hat(self, raw, eta, sig, man=None):
        """Scalar hat coordinates, shape ``(n, 5)`` or ``(n, 3)``.

        The internal-model block needs the hidden target and is assembled
        by :meth:`hat_eta`.
        """
        man = self.manifolds(eta, sig) if man is None else man
        k = self.k
        x1 = raw[:, 0] - self.theta_star
        x2 = raw[:, 1] - self.w_star + k[:, 0] * x1 / TWO_PI
        if self.kind == "G":
            x3 = raw[:, 2] - man["P_M"] - (self.e_M1 * x1 + self.e_M2 * x2)
            x4 = raw[:, 3] - man["P_v"] - (self.e_v1 * x1 + self.e_v2 * x2 + self.e_v3 * x3)
            x5 = raw[:, 4] - man["P_E"]
            return np.stack([x1, x2, x3, x4, x5], axis=1)
        x3 = raw[:, 2] - man["P_E"] + (self.e_M1 * x1 + self.e_M2 * x2)
        return np.stack([x1, x2, x3], axis=1)

    def hat_eta(self, raw, eta, target):
        """Internal-model block ``eta - vartheta + m N (w - w*)``."""
        return eta - target + (self.m * (raw[:, 1] - self.w_star))[:, None] * self.N

    # -- control ------------------------------------------------------------
    def feedback(self, xh):
        k, c = self.k, self.c
        if self.kind == "G":
            x1, x2, x3, x4, x5 = xh.T
            ev1, ev2, ev3 = self.e_v1, self.e_v2, self.e_v3
            TG, TCH, m, R = self.T_G, self.T_CH, self.m, self.R
            p_ref = ((ev1 - k[:, 0] / (TWO_PI * R) - TG * k[:, 0] * ev1) * x1
                     + (ev2 + 1 / R + TWO_PI * TG * ev1 - TG * k[:, 1] * ev2) * x2
                     + (ev3 + TG / m * ev2 - TG * k[:, 2] * ev3) * x3
                     + (-TG * k[:, 3] + 1 + TG / TCH * ev3) * x4)
            lam = (c + k[:, 4]) * x5
            return p_ref, lam
        x1, x2, x3 = xh.T
        e1, e2 = self.e_M1, self.e_M2
        lam = (-e1 * (c + k[:, 0]) * x1 + (TWO_PI * e1 - e2 * (c + k[:, 1])) * x2
               + (c + k[:, 2] - e2 / self.m) * x3)
        return (lam,)

    def control(self, raw, eta, sig):
        """Inputs ``(P_ref, lam)`` for generators, ``(lam,)`` for load buses."""
        man = self.manifolds(eta, sig)
        fb = self.feedback(self.hat(raw, eta, sig, man))
        if self.kind == "G":
            return man["P_ref"] + fb[0], man["lam"] + fb[1]
        return (man["lam"] + fb[0],)


# -- single-bus API -----------------------------------------------------------

def _one(bus: LocalBus, gains: GainSet1) -> S1Group:
    return S1Group([bus], [gains])


def _sig(view: LocalView):
    return tuple(np.array([v]) for v in view.demand())


def manifolds_s1(bus: LocalBus, gains: GainSet1, eta, t: float) -> dict:
    """Manifold values at time ``t`` with ``Psi T^-1 eta`` in place of the wind."""
    g = _one(bus, gains)
    sig = tuple(np.array([v]) for v in bus.demand.derivatives(t))
    out = g.manifolds(np.asarray(eta, dtype=float).reshape(1, -1), sig)
    return {key: float(v[0]) for key, v in out.items()}


def hat_transform_s1(view: LocalView, gains: GainSet1, target=None) -> np.ndarray:
    """Hat coordinates of one bus; the internal-model block is appended when
    the hidden target ``vartheta`` is supplied."""
    bus = view.bus
    g = _one(bus, gains)
    raw = view.raw(raw_columns(bus.kind, "robust"))[None, :]
    eta = view.eta.reshape(1, -1)
    xh = g.hat(raw, eta, _sig(view))[0]
    if target is None:
        return xh
    return np.concatenate([xh, g.hat_eta(raw, eta, np.asarray(target).reshape(1, -1))[0]])


def control_law_s1(view: LocalView, gains: GainSet1) -> tuple[float, ...]:
    """``(P_ref, lam)`` at a generator bus or ``(lam,)`` at a load bus."""
    bus = view.bus
    g = _one(bus, gains)
    raw = view.raw(raw_columns(bus.kind, "robust"))[None, :]
    return tuple(float(u[0]) for u in g.control(raw, view.eta.reshape(1, -1), _sig(view)))


def baseline_control(view: LocalView, gains: GainSet1) -> tuple[float, ...]:
    """The same law with the internal-model estimate switched off."""
    bus = view.bus
    g = _one(bus, gains)
    raw = view.raw(raw_columns(bus.kind, "robust"))[None, :]
    return tuple(float(u[0]) for u in g.control(raw, np.zeros((1, 2 * bus.ell)), _sig(view)))


# -- gain design ----------------------------------------------------------------

@dataclass(frozen=True)
class Design:
    """Gains plus the internal model chosen alongside them."""

    gains: object
    spec: InternalModelSpec | None
    bus: LocalBus


def _choose_MC(desc_im, ell):
    M = symmetric_M(ell) if not desc_im or "design_M" not in desc_im else np.asarray(desc_im["design_M"], dtype=float)
    C = np.ones(2 * ell) if not desc_im or "C" not in desc_im else np.asarray(desc_im["C"], dtype=float)
    return M, C


def design_gains_alg1(scenario, delta: float | None = None) -> dict[int, Design]:
    """Local gain and internal-model design for the robust controller.

    Every bus uses only its own parameters, its stiffness sum and its
    exosystem description.
    """
    from .internal_model import InternalModelSpec as IMS

    delta = scenario.delta if delta is None else float(delta)
    if not delta > 0:
        raise ValueError("delta must be positive")
    topo = scenario.topology
    out: dict[int, Design] = {}
    for desc in scenario.buses:
        if not desc.controlled:
            continue
        p = desc.params
        st = topo.stiffness_sum(desc.id)
        k1 = 10 * math.pi + delta
        spec = None
        alpha = None
        if desc.wind is not None:
            ell = desc.wind.ell
            M, C = _choose_MC(desc.internal_model, ell)
            Cn = C / np.linalg.norm(C)
            if not check_controllability(M, Cn):
                from .internal_model import ConfigurationError

                raise ConfigurationError(f"bus {desc.id}: (M, C) is not controllable")
            norms = [np.linalg.norm(e) for e in e_eta(k1, p, st, M, Cn)]
            lam_max = float(np.max(np.linalg.eigvals(M).real))
            alpha = -lam_max / (1 + delta) * min(0.2 / v for v in norms if v > 0)
            spec = IMS.build(M, alpha * Cn, desc.wind.Phi, desc.wind.Psi, desc.wind.ell_L, desc.wind.ell_M)
        bus = LocalBus.from_topology(topo, desc.id, scenario.setpoint_hz, spec)
        psi_s = 0.0 if spec is None else float(np.linalg.norm(spec.rows["all"]))
        k2 = 5 / p.m * max(st, 1.0, psi_s) + delta
        e_M2 = derive_s1(desc.kind, (k1, k2, 1.0, 1.0, 1.0), p, st, spec)["e_M2"]
        terms = [abs(e_M2) * st / p.m, abs(e_M2) / p.m, abs(e_M2) * psi_s / p.m]
        if desc.kind == "G":
            terms.append(1 / p.T_CH)
        k3 = 5 * max(terms) + delta
        if desc.kind == "G":
            c = derive_s1("G", (k1, k2, k3, 1.0, 1.0), p, st, spec)
            q = abs(c["e_v2"] - c["e_M2"] * c["e_v3"]) / p.m
            k4 = 5 * max(q * (1 + st), q * psi_s) + delta
            k = (k1, k2, k3, k4, delta)
        else:
            k = (k1, k2, k3)
        out[desc.id] = Design(GainSet1.build(bus, k, delta, alpha), spec, bus)
    return out
