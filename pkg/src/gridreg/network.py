"""Networked closed loop: state layout, right-hand side, hat coordinates and
the certificates built on top of them (Hurwitz and negative definiteness).

The network state is one flat vector. Per bus it holds the raw plant
states (rotating-frame phase ``delta = theta - 2 pi w* t`` first), the
internal-model state and, for the adaptive controller, the flattened
``T^-1`` estimate. After all buses come the exosystem states ``chi`` and
the BESS filter outputs of the wind buses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import flint

from .adaptive import GainSet2, S2Group, design_gains_alg2, project_box
from .grid import Scenario
from .internal_model import InternalModelSpec
from .local import LocalBus, raw_columns
from .robust import Design, GainSet1, S1Group, design_gains_alg1

TWO_PI = 2.0 * math.pi
EXACT_PREC = 256  # bits used when probing the closed-loop matrix
SOLUTIONS = ("robust", "adaptive", "baseline")


class ConsistencyError(RuntimeError):
    """The closed loop failed an internal linearity check."""


# -- design ------------------------------------------------------------------

def manual_designs(scenario: Scenario, solution: str) -> dict[int, Design]:
    """Gains and internal models taken verbatim from the scenario.

    ``controller.gains`` maps ``"G"`` and ``"L"`` (optionally suffixed with
    ``"_robust"`` or ``"_adaptive"``) to gain lists; per-bus ``M`` and ``N``
    come from each bus's ``internal_model`` entry.
    """
    from .internal_model import default_M

    sol = "adaptive" if solution == "adaptive" else "robust"
    gains = scenario.controller.gains
    topo = scenario.topology
    out: dict[int, Design] = {}
    for desc in scenario.buses:
        if not desc.controlled:
            continue
        spec = None
        if desc.wind is not None:
            im = desc.internal_model or {}
            ell = desc.wind.ell
            M = np.asarray(im.get("M", default_M(ell)), dtype=float)
            N = np.asarray(im.get("N", np.ones(2 * ell)), dtype=float)
            spec = InternalModelSpec.build(M, N, desc.wind.Phi, desc.wind.Psi, desc.wind.ell_L, desc.wind.ell_M)
        bus = LocalBus.from_topology(topo, desc.id, scenario.setpoint_hz, spec)
        key = f"{desc.kind}_{sol}"
        k = gains.get(key, gains.get(desc.kind))
        if k is None:
            raise ValueError(f"controller.gains: no gains for bus kind {desc.kind!r} ({key})")
        cls = GainSet2 if sol == "adaptive" else GainSet1
        out[desc.id] = Design(cls.build(bus, k), spec, bus)
    return out


def designs_for(scenario: Scenario, solution: str, design: str | None = None) -> dict[int, Design]:
    design = scenario.controller.design if design is None else design
    if design == "manual":
        return manual_designs(scenario, solution)
    if solution == "adaptive":
        return design_gains_alg2(scenario)
    return design_gains_alg1(scenario)


# -- exogenous signals -----------------------------------------------------------

class SignalBank:
    """Vectorized sums of sinusoids: one row per channel."""

    def __init__(self, specs):
        n = len(specs)
        K = max((len(s.terms) for s in specs), default=0)
        self.const = np.array([s.constant for s in specs], dtype=float)
        self.amp = np.zeros((n, K))
        self.freq = np.zeros((n, K))
        self.phase = np.zeros((n, K))
        for i, s in enumerate(specs):
            for j, term in enumerate(s.terms):
                self.amp[i, j], self.freq[i, j], self.phase[i, j] = term.amplitude, term.frequency_rad, term.phase
        self._af = self.amp * self.freq
        self._af2 = self.amp * self.freq**2

    def __call__(self, t: float):
        arg = self.freq * t + self.phase
        sn, cs = np.sin(arg), np.cos(arg)
        return (self.const + (self.amp * sn).sum(1), (self._af * cs).sum(1), -(self._af2 * sn).sum(1))


@dataclass(frozen=True)
class WindGate:
    """Connection state of every wind bus as a function of time."""

    times: tuple[tuple[float, ...], ...]
    states: tuple[tuple[bool, ...], ...]
    initial: tuple[bool, ...]

    @classmethod
    def from_events(cls, events, wind_buses):
        times, states, initial = [], [], []
        for b in wind_buses:
            evs = sorted((e for e in events if e.bus == b), key=lambda e: e.time_s)
            times.append(tuple(e.time_s for e in evs))
            states.append(tuple(e.action == "wind_connect" for e in evs))
            initial.append(not evs or evs[0].action == "wind_disconnect")
        return cls(tuple(times), tuple(states), tuple(initial))

    def __call__(self, t: float) -> np.ndarray:
        out = np.array(self.initial, dtype=float)
        for i, (ts, ss) in enumerate(zip(self.times, self.states)):
            for te, se in zip(ts, ss):
                if t >= te:
                    out[i] = float(se)
        return out

    def breakpoints(self) -> list[float]:
        return sorted({t for ts in self.times for t in ts})


# -- closed loop ---------------------------------------------------------------

class _Group:
    """Index bookkeeping for a batch of buses that share a control law."""

    def __init__(self, kind, ell, positions, raw_idx, eta_idx, tinv_idx, ctrl):
        self.kind = kind
        self.ell = ell
        self.pos = np.asarray(positions, dtype=int)
        self.raw_idx = np.asarray(raw_idx, dtype=int).reshape(len(positions), -1)
        self.eta_idx = np.asarray(eta_idx, dtype=int).reshape(len(positions), 2 * ell)
        self.tinv_idx = np.asarray(tinv_idx, dtype=int).reshape(len(positions), -1)
        self.ctrl = ctrl


class ClosedLoop:
    """The networked plant under one of the three controllers.

    Parameters
    ----------
    scenario : Scenario
    solution : {'robust', 'adaptive', 'baseline'}
    designs : dict, optional
        Bus id to :class:`Design`; defaults to the scenario's design choice.
    freeze_estimate : bool
        Adaptive only: replace the online estimate by the true ``T^-1`` and
        drop the estimator states (used to extract the nominal matrix).
    passive_damping : {'deviation', 'absolute'}
        Damping at passive buses acts on ``w - w*`` (default) or on ``w``.
        With ``'absolute'`` every passive bus draws ``D w*`` and the desired
        angles are no longer an equilibrium.
    """

    def __init__(self, scenario: Scenario, solution: str, designs: dict[int, Design] | None = None,
                 freeze_estimate: bool = False, passive_damping: str = "deviation"):
        if solution not in SOLUTIONS:
            raise ValueError(f"unknown controller {solution!r}")
        if passive_damping not in ("deviation", "absolute"):
            raise ValueError(f"unknown passive damping {passive_damping!r}")
        self.passive_damping = passive_damping
        self.scenario = scenario
        self.solution = solution
        self.adaptive = solution == "adaptive"
        self.estimating = self.adaptive and not freeze_estimate
        topo = scenario.topology
        self.topo = topo
        self.w_star = scenario.setpoint_hz
        self.designs = designs_for(scenario, solution) if designs is None else designs
        nb = len(topo)
        self.nbus = nb
        self.bus_ids = [b.id for b in topo.buses]

        # local views of every bus
        self.local: list[LocalBus] = []
        for b in topo.buses:
            d = self.designs.get(b.id)
            self.local.append(d.bus if d is not None else LocalBus.from_topology(topo, b.id, self.w_star))

        # layout
        sol_cols = "adaptive" if self.adaptive else "robust"
        off = 0
        self.slices: list[dict[str, slice]] = []
        for lb in self.local:
            sl = {}
            ncol = len(raw_columns(lb.kind, sol_cols))
            sl["raw"] = slice(off, off + ncol)
            off += ncol
            p = 2 * lb.ell
            sl["eta"] = slice(off, off + p)
            off += p
            q = p * p if self.estimating else 0
            sl["tinv"] = slice(off, off + q)
            off += q
            self.slices.append(sl)
        self.n_bus_states = off
        self.wind_pos = [k for k, lb in enumerate(self.local) if lb.ell > 0]
        self.T_bess = scenario.bess_time_constant
        self.chi_slices, self.y_index = [], []
        for k in self.wind_pos:
            p = 2 * self.local[k].ell
            self.chi_slices.append(slice(off, off + p))
            off += p
            if self.T_bess is not None:
                self.y_index.append(off)
                off += 1
        self.nz = off
        self.delta_idx = np.array([s["raw"].start for s in self.slices])
        self.w_idx = self.delta_idx + 1
        self._lap_dense = topo.laplacian()
        self.lap = sp.csr_matrix(self._lap_dense)

        # groups
        groups: dict[tuple, list[int]] = {}
        for k, lb in enumerate(self.local):
            groups.setdefault((lb.kind, lb.ell), []).append(k)
        self.groups: list[_Group] = []
        for (kind, ell), ks in sorted(groups.items()):
            raw = [np.arange(self.slices[k]["raw"].start, self.slices[k]["raw"].stop) for k in ks]
            eta = [np.arange(self.slices[k]["eta"].start, self.slices[k]["eta"].stop) for k in ks]
            tin = [np.arange(self.slices[k]["tinv"].start, self.slices[k]["tinv"].stop) for k in ks]
            ctrl = None
            if kind != "T":
                buses = [self.local[k] for k in ks]
                gains = [self.designs[self.bus_ids[k]].gains for k in ks]
                if self.adaptive:
                    rho = [self.topo.bus(self.bus_ids[k]).wind.rho_ceiling if ell else 0.0 for k in ks]
                    ctrl = S2Group(buses, gains, scenario.controller.gamma, rho)
                else:
                    ctrl = S1Group(buses, gains)
            self.groups.append(_Group(kind, ell, ks, raw, eta, tin, ctrl))

        # exogenous signals: inelastic demand per bus, high-frequency wind per wind bus
        self.demand = SignalBank([lb.demand for lb in self.local])
        from .grid import SignalSpec

        hf = [SignalSpec(0.0, self.topo.bus(self.bus_ids[k]).wind.high_freq) for k in self.wind_pos]
        self.hf = SignalBank(hf)
        self.n_sig = 3 * nb + len(self.wind_pos)
        self.gate = WindGate.from_events(scenario.events, [self.bus_ids[k] for k in self.wind_pos])

        # exosystem data
        self.rho2 = []
        self.psi_rows = []
        self.filter_maps = []  # chi -> filtered exosystem state
        for k in self.wind_pos:
            w = self.topo.bus(self.bus_ids[k]).wind
            self.rho2.append(np.asarray(w.rho, dtype=float) ** 2)
            self.psi_rows.append(w.Psi)
            Phi = w.Phi
            F = np.eye(Phi.shape[0]) if self.T_bess is None else np.linalg.inv(np.eye(Phi.shape[0]) + self.T_bess * Phi)
            self.filter_maps.append(F)
        chi_flat = np.concatenate([np.arange(s.start, s.stop) for s in self.chi_slices]) if self.chi_slices else np.zeros(0, int)
        self._chi_a = chi_flat[0::2]
        self._chi_b = chi_flat[1::2]
        self._rho2_flat = np.concatenate(self.rho2) if self.rho2 else np.zeros(0)
        # ungated renewable source per wind bus as a sparse map of (z, s)
        R = sp.lil_matrix((len(self.wind_pos), self.nz))
        Q = sp.lil_matrix((len(self.wind_pos), self.n_sig))
        for i, k in enumerate(self.wind_pos):
            if self.T_bess is not None:
                R[i, self.y_index[i]] = 1.0
            else:
                R[i, self.chi_slices[i]] = self.psi_rows[i]
                Q[i, 3 * nb + i] = 1.0
        self.R = R.tocsr()
        self.Q = Q.tocsr()
        self._pos_wind = np.array(self.wind_pos, dtype=int)

    # -- helpers --------------------------------------------------------------
    def signals(self, t: float) -> np.ndarray:
        v, d1, d2 = self.demand(t)
        return np.concatenate([v, d1, d2, self.hf(t)[0]])

    def _split_sig(self, s):
        nb = self.nbus
        return s[:nb], s[nb:2 * nb], s[2 * nb:3 * nb], s[3 * nb:]

    def pren(self, t: float, z, s, gate=None) -> np.ndarray:
        """Renewable injection per bus after the connection gate; ``gate``
        overrides the schedule (the integrator holds it over a step)."""
        out = np.zeros(self.nbus)
        if self.wind_pos:
            g = self.gate(t) if gate is None else gate
            out[self._pos_wind] = g * (self.R @ z + self.Q @ s)
        return out

    def _estimate(self, g, z):
        """Current ``T^-1`` estimate of a group, read inside the projection box
        (RK4 stages may leave it before the post-step clamp)."""
        if not self.estimating:
            return g.ctrl.S
        T = z[g.tinv_idx].reshape(-1, 2 * g.ell, 2 * g.ell)
        if not g.ell or T.dtype == object:
            return T
        return project_box(T, g.ctrl.Psi, g.ctrl.box)

    # -- vector field -----------------------------------------------------------
    def rhs(self, z, s, pren):
        """Time derivative for given state, exogenous signals and injections."""
        dz = np.zeros_like(z)
        IE, IE1, IE2, hf = self._split_sig(s)
        delta = z[self.delta_idx]
        # object arrays carry exact arithmetic for the certificates
        flows = (self._lap_dense if z.dtype == object else self.lap) @ delta
        ws = self.w_star
        for g in self.groups:
            raw = z[g.raw_idx]
            pos = g.pos
            w = raw[:, 1]
            c = g.ctrl
            if g.kind == "T":
                m = np.array([self.local[k].params.m for k in pos])
                D = np.array([self.local[k].params.D for k in pos])
                dz[g.raw_idx[:, 0]] = TWO_PI * (w - ws)
                w_ref = ws if self.passive_damping == "deviation" else 0.0
                dz[g.raw_idx[:, 1]] = -(D * (w - w_ref) + flows[pos]) / m
                continue
            eta = z[g.eta_idx]
            sig = (IE[pos], IE1[pos], IE2[pos])
            if self.adaptive:
                That = self._estimate(g, z)
                u, dT = c.step(raw, eta, That, sig)
                if self.estimating:
                    dz[g.tinv_idx] = dT.reshape(len(pos), -1)
            else:
                u = c.control(raw, np.zeros_like(eta) if self.solution == "baseline" else eta, sig)
            P_E = raw[:, -1]
            PL = P_E + IE[pos]
            m, D = c.m, c.D
            dz[g.raw_idx[:, 0]] = TWO_PI * (w - ws)
            if g.kind == "G":
                P_M = raw[:, 2]
                dz[g.raw_idx[:, 1]] = -(D * w + flows[pos] - P_M + PL - pren[pos]) / m
                if self.adaptive:
                    dz[g.raw_idx[:, 2]] = -(P_M - u[0]) / c.T_CH
                else:
                    P_v = raw[:, 3]
                    dz[g.raw_idx[:, 2]] = -(P_M - P_v) / c.T_CH
                    dz[g.raw_idx[:, 3]] = -(P_v + w / c.R - u[0]) / c.T_G
                lam = u[1]
                drive = -P_M + PL + c.fs + D * ws
            else:
                dz[g.raw_idx[:, 1]] = -(D * w + flows[pos] + PL - pren[pos]) / m
                lam = u[0]
                drive = PL + c.fs + D * ws
            dz[g.raw_idx[:, -1]] = c.b + c.c * P_E - lam
            if g.ell:
                dz[g.eta_idx] = np.einsum("njk,nk->nj", c.M, eta) + c.N * drive[:, None]
        # exosystem and BESS
        if self.wind_pos:
            dz[self._chi_a] = z[self._chi_b]
            dz[self._chi_b] = -self._rho2_flat * z[self._chi_a]
            if self.T_bess is not None:
                for i in range(len(self.wind_pos)):
                    u = self.psi_rows[i] @ z[self.chi_slices[i]] + hf[i]
                    dz[self.y_index[i]] = (u - z[self.y_index[i]]) / self.T_bess
        return dz

    def field(self, t: float, z, gate=None) -> np.ndarray:
        s = self.signals(t)
        return self.rhs(z, s, self.pren(t, z, s, gate))

    def post_step(self, z):
        """Projection of the estimate after each integration step."""
        if not self.estimating:
            return z
        for g in self.groups:
            if g.kind == "T" or not g.ell:
                continue
            p = 2 * g.ell
            T = z[g.tinv_idx].reshape(-1, p, p)
            z[g.tinv_idx] = project_box(T, g.ctrl.Psi, g.ctrl.box).reshape(len(g.pos), -1)
        return z

    # -- oracle and hat coordinates --------------------------------------------
    def target(self, t: float, z) -> list[np.ndarray]:
        """Hidden internal-model target ``vartheta = T chi_f`` per wind bus."""
        gate = self.gate(t) if self.wind_pos else np.zeros(0)
        out = []
        for i, k in enumerate(self.wind_pos):
            spec = self.local[k].spec
            out.append(gate[i] * (spec.T_star @ (self.filter_maps[i] @ z[self.chi_slices[i]])))
        return out

    def hat_blocks(self, t: float, z, s=None) -> list[np.ndarray]:
        """Hat coordinates per bus in topology order."""
        s = self.signals(t) if s is None else s
        IE, IE1, IE2, _ = self._split_sig(s)
        targets = dict(zip(self.wind_pos, self.target(t, z)))
        out: list[np.ndarray | None] = [None] * self.nbus
        for g in self.groups:
            raw = z[g.raw_idx]
            if g.kind == "T":
                th = np.array([self.local[k].theta_star for k in g.pos])
                xh = np.stack([raw[:, 0] - th, raw[:, 1] - self.w_star], axis=1)
                for r, k in enumerate(g.pos):
                    out[k] = xh[r]
                continue
            c = g.ctrl
            eta = z[g.eta_idx]
            sig = (IE[g.pos], IE1[g.pos], IE2[g.pos])
            if self.adaptive:
                That = self._estimate(g, z)
                xh = c.hat(raw, eta, That, sig)
            elif self.solution == "baseline":
                xh = c.hat(raw, np.zeros_like(eta), sig)
            else:
                xh = c.hat(raw, eta, sig)
            if g.ell and self.solution != "baseline":
                tgt = np.array([targets[k] for k in g.pos])
                xh = np.concatenate([xh, c.hat_eta(raw, eta, tgt)], axis=1)
            for r, k in enumerate(g.pos):
                out[k] = xh[r]
        return out

    def hat(self, t: float, z, s=None) -> np.ndarray:
        return np.concatenate(self.hat_blocks(t, z, s))

    def hat_sizes(self) -> list[int]:
        z = np.zeros(self.nz)
        return [b.size for b in self.hat_blocks(0.0, z)]

    def inputs(self, t: float, z) -> list[tuple[float, ...]]:
        """Control inputs per bus (empty tuple at passive buses)."""
        s = self.signals(t)
        IE, IE1, IE2, _ = self._split_sig(s)
        out: list[tuple] = [()] * self.nbus
        for g in self.groups:
            if g.kind == "T":
                continue
            c = g.ctrl
            raw, eta = z[g.raw_idx], z[g.eta_idx]
            sig = (IE[g.pos], IE1[g.pos], IE2[g.pos])
            if self.adaptive:
                That = self._estimate(g, z)
                u, _ = c.step(raw, eta, That, sig)
            else:
                u = c.control(raw, np.zeros_like(eta) if self.solution == "baseline" else eta, sig)
            for r, k in enumerate(g.pos):
                out[k] = tuple(float(x[r]) for x in u)
        return out

    # -- initial states -----------------------------------------------------------
    def initial_state(self, mode: str | None = None) -> np.ndarray:
        """``'rest'``: phases at offset, nominal frequency, powers and
        internal models at zero. ``'manifold'``: every state on its manifold
        with the internal model locked on the wind."""
        mode = self.scenario.initial if mode is None else mode
        z = np.zeros(self.nz)
        for k, lb in enumerate(self.local):
            sl = self.slices[k]
            z[sl["raw"].start] = lb.theta_star
            z[sl["raw"].start + 1] = self.w_star
        for i, k in enumerate(self.wind_pos):
            w = self.topo.bus(self.bus_ids[k]).wind
            chi0 = np.asarray(w.chi0, dtype=float)
            z[self.chi_slices[i]] = chi0
            if self.T_bess is not None:
                z[self.y_index[i]] = w.Psi @ (self.filter_maps[i] @ chi0)
        if mode == "rest":
            return z
        if mode != "manifold":
            raise ValueError(f"unknown initial state {mode!r}")
        s = self.signals(0.0)
        IE, IE1, IE2, _ = self._split_sig(s)
        targets = dict(zip(self.wind_pos, self.target(0.0, z)))
        for g in self.groups:
            if g.kind == "T":
                continue
            c = g.ctrl
            eta = np.array([targets[k] if g.ell else np.zeros(0) for k in g.pos]).reshape(len(g.pos), -1)
            if self.solution != "baseline":
                z[g.eta_idx] = eta
            else:
                eta = np.zeros_like(eta)
            sig = (IE[g.pos], IE1[g.pos], IE2[g.pos])
            if self.adaptive:
                man = c.manifolds(eta, c.S, sig)
                if self.estimating:
                    z[g.tinv_idx] = c.S.reshape(len(g.pos), -1)
            else:
                man = c.manifolds(eta, sig)
            cols = raw_columns(g.kind, "adaptive" if self.adaptive else "robust")
            for j, name in enumerate(cols):
                if name in ("P_M", "P_v", "P_E"):
                    z[g.raw_idx[:, j]] = man[name]
        return z

    # -- linear structure -------------------------------------------------------------
    def compile_affine(self, check: bool = True):
        """Exact affine form ``z' = F z + Bs s + Br pren + h`` (non-estimating loops)."""
        if self.estimating:
            raise ValueError("the estimating adaptive loop is not affine")
        nz, ns, nb = self.nz, self.n_sig, self.nbus
        z0, s0, p0 = np.zeros(nz), np.zeros(ns), np.zeros(nb)
        h = self.rhs(z0, s0, p0)
        F = np.empty((nz, nz))
        for k in range(nz):
            e = np.zeros(nz)
            e[k] = 1.0
            F[:, k] = self.rhs(e, s0, p0) - h
        Bs = np.empty((nz, ns))
        for k in range(ns):
            e = np.zeros(ns)
            e[k] = 1.0
            Bs[:, k] = self.rhs(z0, e, p0) - h
        Br = np.empty((nz, nb))
        for k in range(nb):
            e = np.zeros(nb)
            e[k] = 1.0
            Br[:, k] = self.rhs(z0, s0, e) - h
        if check:
            rng = np.random.default_rng(0)
            z, s, p = rng.normal(size=nz), rng.normal(size=ns), rng.normal(size=nb)
            direct = self.rhs(z, s, p)
            lin = F @ z + Bs @ s + Br @ p + h
            scale = 1.0 + np.abs(F).sum(1) + np.abs(Bs).sum(1) + np.abs(Br).sum(1) + np.abs(h)
            if np.max(np.abs(direct - lin) / scale) > 1e-9:
                raise ConsistencyError("closed loop is not affine in the state")
        return AffineLoop(sp.csr_matrix(F), sp.csr_matrix(Bs), sp.csr_matrix(Br), h, self)


@dataclass
class AffineLoop:
    F: sp.csr_matrix
    Bs: sp.csr_matrix
    Br: sp.csr_matrix
    h: np.ndarray
    loop: ClosedLoop

    def field(self, t: float, z, gate=None):
        L = self.loop
        s = L.signals(t)
        return self.F @ z + self.Bs @ s + self.Br @ L.pren(t, z, s, gate) + self.h


# -- certificates -------------------------------------------------------------------

def _plant_count(loop: ClosedLoop) -> int:
    return loop.n_bus_states


def _mid(x) -> float:
    return float(x.mid())


def _exact_maps(loop: ClosedLoop, tol: float):
    """Ball-arithmetic matrices ``H`` and ``F`` over the bus states.

    Unit probes are exact, so the entries carry no cancellation error even
    when the gains span fifteen orders of magnitude.
    """
    n, nz = _plant_count(loop), loop.nz
    zero = flint.arb(0)
    z0 = np.array([zero] * nz, dtype=object)
    s0 = np.array([zero] * loop.n_sig, dtype=object)
    p0 = np.array([zero] * loop.nbus, dtype=object)
    h_rhs = loop.rhs(z0, s0, p0)
    h_hat = loop.hat(0.0, z0, s0)
    if h_hat.size != n:
        raise ConsistencyError("hat coordinates and bus states differ in dimension")
    F = np.empty((n, n), dtype=object)
    H = np.empty((n, n), dtype=object)
    for k in range(n):
        e = z0.copy()
        e[k] = flint.arb(1)
        F[:, k] = (loop.rhs(e, s0, p0) - h_rhs)[:n]
        H[:, k] = loop.hat(0.0, e, s0) - h_hat
    # superposition on a doubled unit probe and a dyadic random probe
    rng = np.random.default_rng(1)
    zr = z0.copy()
    zr[:n] = [flint.arb(float(v)) for v in np.round(rng.normal(size=n) * 64) / 64]
    e0 = z0.copy()
    e0[0] = flint.arb(2)
    for probe in (e0, zr):
        x = probe[:n]
        for got, M in (((loop.rhs(probe, s0, p0) - h_rhs)[:n], F), (loop.hat(0.0, probe, s0) - h_hat, H)):
            lin = M.dot(x)
            res = np.array([abs(_mid(a - b)) for a, b in zip(got, lin)])
            scale = 1.0 + np.array([sum(abs(_mid(v)) for v in row) for row in M]) * max(abs(_mid(v)) for v in x)
            if np.max(res / scale) > tol:
                raise ConsistencyError("superposition check failed: hat dynamics are not linear")
    return flint.arb_mat(H.tolist()), flint.arb_mat(F.tolist())


def _to_float(M) -> np.ndarray:
    return np.array([[_mid(M[i, j]) for j in range(M.ncols())] for i in range(M.nrows())])


def assemble_A(loop: ClosedLoop, tol: float = 1e-8, with_inverse: bool = False):
    """Closed-loop matrix in hat coordinates, obtained by probing.

    With the exogenous signals switched off the hat map is linear in the bus
    states, ``xhat = H z``, and the dynamics are ``z' = F z``; the matrix is
    ``H F H^-1``. The product is formed in ball arithmetic and rounded once,
    so every entry is correct to double precision. Linearity of both maps
    is verified on doubled and random probes. With ``with_inverse`` the
    exactly computed ``A^-1`` is returned as well (``None`` if singular).
    """
    if loop.estimating:
        raise ValueError("build the loop with freeze_estimate=True to extract the nominal matrix")
    if loop.solution == "baseline":
        raise ValueError("the baseline loop has no internal-model coordinates")
    old = flint.ctx.prec
    flint.ctx.prec = EXACT_PREC
    try:
        H, F = _exact_maps(loop, tol)
        try:
            Hinv = H.inv()
        except ZeroDivisionError as exc:
            raise ConsistencyError("hat map is singular") from exc
        A = H * F * Hinv
        if not with_inverse:
            return _to_float(A)
        try:
            Ai = _to_float(A.inv())
        except ZeroDivisionError:
            Ai = None
        return _to_float(A), Ai
    finally:
        flint.ctx.prec = old


@dataclass(frozen=True)
class HurwitzResult:
    passed: bool
    max_real: float
    error: float = 0.0

    def __bool__(self):
        return self.passed

    def __iter__(self):
        return iter((self.passed, self.max_real))


def _eig_with_error(A):
    """Eigenvalues with first-order error bounds ``eps ||A|| kappa``."""
    w, vl, vr = sla.eig(A, left=True, right=True)
    dots = np.abs(np.einsum("ij,ij->j", vl.conj(), vr))
    kappa = np.linalg.norm(vl, axis=0) * np.linalg.norm(vr, axis=0) / np.maximum(dots, 1e-300)
    # a defective pair splits by about sqrt(eps) ||A||; cap kappa accordingly
    kappa = np.minimum(kappa, 1.0 / np.sqrt(np.finfo(float).eps))
    err = 10 * np.finfo(float).eps * np.linalg.norm(A, "fro") * kappa
    return w, err


def spectrum(A, A_inv=None):
    """Eigenvalues of ``A`` and their error bounds.

    With a stiff matrix the small eigenvalues drown in the rounding error of
    the large ones. Given an accurate ``A^-1`` the spectrum is split at a
    radius ``R``: eigenvalues beyond ``R`` come from ``A``, the rest are
    inverted eigenvalues of ``A^-1``. ``R`` is the gap whose split is
    consistent (counts add up) and has the smallest relative error.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    lam, e_lam = _eig_with_error(A)
    if A_inv is None or lam.size == 0:
        return lam, e_lam
    mu, e_mu = _eig_with_error(np.asarray(A_inv, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        lam_b = 1.0 / mu
        e_b = e_mu / np.abs(mu) ** 2
    mags = np.sort(np.abs(lam_b[np.isfinite(lam_b)]))
    cands = [0.0, np.inf] + list(np.sqrt(mags[:-1] * mags[1:])[mags[1:] > 1.5 * mags[:-1]])
    n = lam.size
    best = None
    for R in cands:
        fast = np.abs(lam) > R
        slow = np.isfinite(lam_b) & (np.abs(lam_b) <= R)
        if fast.sum() + slow.sum() != n:
            continue
        vals = np.concatenate([lam[fast], lam_b[slow]])
        errs = np.concatenate([e_lam[fast], e_b[slow]])
        worst = float(np.max(errs / np.maximum(np.abs(vals), 1e-300)))
        if best is None or worst < best[0]:
            best = (worst, vals, errs)
    if best is None:
        return lam, e_lam
    return best[1], best[2]


def is_hurwitz(A, margin: float = 1e-9, A_inv=None) -> HurwitzResult:
    """All eigenvalues strictly in the left half plane.

    The verdict needs ``max Re < -margin`` with the rounding error of the
    rightmost eigenvalue smaller than its distance to the axis.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    if not np.all(np.isfinite(A)):
        raise np.linalg.LinAlgError("matrix has non-finite entries")
    if A.size == 0:
        return HurwitzResult(True, -np.inf)
    ev, err = spectrum(A, A_inv)
    k = int(np.argmax(ev.real))
    mr, e = float(ev[k].real), float(err[k])
    return HurwitzResult(bool(mr < -margin and mr + e < 0), mr, e)


def hurwitz_certificate(loop: ClosedLoop, margin: float = 1e-9) -> HurwitzResult:
    A, Ai = assemble_A(loop, with_inverse=True)
    return is_hurwitz(A, margin, A_inv=Ai)


def hat_propagator(loop: ClosedLoop, dt: float, prec: int = 512, tol: float = 1e-8) -> np.ndarray:
    """``exp(A dt)`` of the hat dynamics, computed in ball arithmetic.

    Designed gains can put closed-loop eigenvalues near ``-1e15``, far out
    of reach of an explicit integrator; the exact one-step map still
    advances the closed loop in hat coordinates without stiffness limits.
    """
    if loop.estimating:
        raise ValueError("the estimating adaptive loop has no constant propagator")
    if not dt > 0:
        raise ValueError("dt must be positive")
    old = flint.ctx.prec
    flint.ctx.prec = prec
    try:
        H, F = _exact_maps(loop, tol)
        P = (H * F * H.inv() * flint.arb(dt)).exp()
        rad = max(float(P[i, j].rad()) for i in range(P.nrows()) for j in range(P.ncols()))
        if not rad < 1e-30:
            raise ConsistencyError(f"propagator lost precision (radius {rad:.3g})")
        return _to_float(P)
    finally:
        flint.ctx.prec = old


def hat_trajectory(loop: ClosedLoop, xhat0, dt: float, t_end: float, prec: int = 512):
    """Times and hat states of the closed loop from ``xhat0`` on a uniform grid."""
    P = hat_propagator(loop, dt, prec)
    n = int(round(t_end / dt))
    X = np.empty((n + 1, P.shape[0]))
    X[0] = np.asarray(xhat0, dtype=float)
    for k in range(n):
        X[k + 1] = P @ X[k]
    return np.arange(n + 1) * dt, X


@dataclass(frozen=True)
class NegDefResult:
    passed: bool
    max_eig: float
    max_eig_scaled: float

    def __bool__(self):
        return self.passed

    def __iter__(self):
        return iter((self.passed, self.max_eig))


def check_negdef(S, margin: float = 1e-9) -> NegDefResult:
    """Negative definiteness of a symmetric matrix.

    When the diagonal spans many orders of magnitude the verdict is taken
    from the Jacobi-equilibrated matrix ``D^-1/2 S D^-1/2`` (same inertia),
    whose spectrum is computed accurately; ``max_eig`` is always the raw
    largest eigenvalue.
    """
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise ValueError("matrix must be square")
    asym = np.max(np.abs(S - S.T)) if S.size else 0.0
    if asym > 1e-12 * max(1.0, np.max(np.abs(S))):
        raise ValueError(f"matrix is not symmetric (asymmetry {asym:.3g})")
    S = 0.5 * (S + S.T)
    lam = float(np.linalg.eigvalsh(S).max())
    d = np.abs(np.diag(S))
    if np.all(d > 0) and d.max() / d.min() > 1e6:
        r = 1.0 / np.sqrt(d)
        lam_s = float(np.linalg.eigvalsh(S * r[:, None] * r[None, :]).max())
        return NegDefResult(lam_s < -margin * 1e-6, lam, lam_s)
    return NegDefResult(lam < -margin, lam, lam)


def passive_metric(loop: ClosedLoop, A) -> np.ndarray:
    """Block-diagonal weight: identity at controlled buses, the local
    Lyapunov matrix of the isolated swing block at passive buses."""
    sizes = loop.hat_sizes()
    blocks = []
    off = 0
    for lb, n in zip(loop.local, sizes):
        if lb.kind == "T":
            Aii = A[off:off + n, off:off + n]
            P = sla.solve_continuous_lyapunov(Aii.T, -np.eye(n))
            blocks.append(np.real(sla.sqrtm(P)))
        else:
            blocks.append(np.eye(n))
        off += n
    return sla.block_diag(*blocks)


@dataclass(frozen=True)
class SymmetricCertificate:
    literal: NegDefResult
    weighted: NegDefResult

    @property
    def passed(self) -> bool:
        return self.weighted.passed


def negdef_certificate(loop: ClosedLoop, A=None) -> SymmetricCertificate:
    """``A + A^T`` literally and in the passive-bus metric ``W^1/2 A W^-1/2``."""
    A = assemble_A(loop) if A is None else A
    lit = check_negdef(A + A.T)
    Wh = passive_metric(loop, A)
    Aw = Wh @ A @ np.linalg.inv(Wh)
    return SymmetricCertificate(lit, check_negdef(Aw + Aw.T))
