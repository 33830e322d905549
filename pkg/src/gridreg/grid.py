"""Power-network graph, per-bus parameters and scenario files.

A scenario is a JSON document describing the buses (generator ``G``, load
``L`` or passive ``T``), the tie lines, the wind exosystems, inelastic
demand signals, the wind connection schedule and the integrator settings.
Everything here is immutable once loaded.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

KINDS = ("G", "L", "T")


class ScenarioError(ValueError):
    """Raised when a scenario document is malformed or inconsistent."""


def power_flow(theta_i, theta_j, t_ij):
    """Tie-line flow ``t_ij * (theta_i - theta_j)`` in MW."""
    return t_ij * (theta_i - theta_j)


@dataclass(frozen=True)
class BusParams:
    m: float
    D: float
    T_CH: float | None = None
    T_G: float | None = None
    R: float | None = None
    b_prime: float | None = None
    c_prime: float | None = None
    tau: float | None = None

    @property
    def b(self) -> float:
        return self.b_prime / self.tau

    @property
    def c(self) -> float:
        return self.c_prime / self.tau

    @property
    def has_demand_response(self) -> bool:
        return self.b_prime is not None

    def check(self, kind: str, where: str = "params") -> None:
        positive = {"m": self.m, "D": self.D}
        if kind == "G":
            for name in ("T_CH", "T_G", "R"):
                if getattr(self, name) is None:
                    raise ScenarioError(f"{where}.{name}: required for generator buses")
                positive[name] = getattr(self, name)
        demand = [getattr(self, n) for n in ("b_prime", "c_prime", "tau")]
        if any(v is not None for v in demand):
            if kind == "T":
                raise ScenarioError(f"{where}: passive buses have no demand response")
            for name, v in zip(("b_prime", "c_prime", "tau"), demand):
                if v is None:
                    raise ScenarioError(f"{where}.{name}: demand response needs b_prime, c_prime and tau")
            positive["tau"] = self.tau
            if not self.c_prime < 0:
                raise ScenarioError(f"{where}.c_prime: marginal benefit slope must be negative")
        for name, value in positive.items():
            if not (value is not None and math.isfinite(value) and value > 0):
                raise ScenarioError(f"{where}.{name}: must be positive, got {value!r}")


@dataclass(frozen=True)
class Sinusoid:
    amplitude: float
    frequency_rad: float
    phase: float = 0.0


@dataclass(frozen=True)
class SignalSpec:
    """``constant + sum(a * sin(w t + phi))`` with analytic derivatives."""

    constant: float = 0.0
    terms: tuple[Sinusoid, ...] = ()

    def derivatives(self, t):
        """Return value, first and second time derivative at ``t``."""
        t = np.asarray(t, dtype=float)
        v = np.full_like(t, self.constant)
        d1 = np.zeros_like(t)
        d2 = np.zeros_like(t)
        for s in self.terms:
            arg = s.frequency_rad * t + s.phase
            sn, cs = np.sin(arg), np.cos(arg)
            v = v + s.amplitude * sn
            d1 = d1 + s.amplitude * s.frequency_rad * cs
            d2 = d2 - s.amplitude * s.frequency_rad**2 * sn
        return v, d1, d2

    def value(self, t):
        return self.derivatives(t)[0]


@dataclass(frozen=True)
class ExosystemSpec:
    """Wind exosystem: oscillator blocks for low then medium frequencies.

    ``high_freq`` sinusoids are added to the turbine output ahead of the
    battery filter; they are not part of the exosystem.
    """

    rho_low: tuple[float, ...]
    rho_med: tuple[float, ...]
    psi: tuple[float, ...]
    chi0: tuple[float, ...]
    rho_max: float | None = None
    high_freq: tuple[Sinusoid, ...] = ()

    @property
    def ell_L(self) -> int:
        return len(self.rho_low)

    @property
    def ell_M(self) -> int:
        return len(self.rho_med)

    @property
    def ell(self) -> int:
        return self.ell_L + self.ell_M

    @property
    def rho(self) -> tuple[float, ...]:
        return tuple(self.rho_low) + tuple(self.rho_med)

    @property
    def rho_ceiling(self) -> float:
        if self.rho_max is not None:
            return self.rho_max
        return 2.0 * max(self.rho, default=0.0)

    @property
    def Phi(self) -> np.ndarray:
        from .internal_model import exosystem_matrix

        return exosystem_matrix(self.rho_low, self.rho_med)

    @property
    def Psi(self) -> np.ndarray:
        return np.asarray(self.psi, dtype=float)

    def check(self, where: str = "wind") -> None:
        n = 2 * self.ell
        if self.ell == 0:
            raise ScenarioError(f"{where}: at least one oscillator is required")
        if len(self.psi) != n:
            raise ScenarioError(f"{where}.psi: expected length {n}, got {len(self.psi)}")
        if len(self.chi0) != n:
            raise ScenarioError(f"{where}.chi0: expected length {n}, got {len(self.chi0)}")
        if any(r < 0 for r in self.rho):
            raise ScenarioError(f"{where}: frequencies must be non-negative")
        low = [r for r in self.rho_low if r > 0]
        med = [r for r in self.rho_med if r > 0]
        if low and med and max(low) >= min(med):
            raise ScenarioError(f"{where}: every low frequency must lie below every medium one")
        if any(r > self.rho_ceiling for r in self.rho):
            raise ScenarioError(f"{where}.rho_max: below a declared frequency")


@dataclass(frozen=True)
class BusDescriptor:
    id: int
    kind: str
    params: BusParams
    theta_star: float = 0.0
    wind: ExosystemSpec | None = None
    inelastic_demand: SignalSpec | None = None
    # optional per-bus internal-model design: {"M": [[...]], "C": [...]}
    internal_model: Mapping[str, Any] | None = None

    @property
    def controlled(self) -> bool:
        return self.kind in ("G", "L")

    @property
    def ell(self) -> int:
        return 0 if self.wind is None else self.wind.ell

    @property
    def demand(self) -> SignalSpec:
        return self.inelastic_demand if self.inelastic_demand is not None else SignalSpec()


class NetworkTopology:
    """Undirected bus graph with per-line stiffness ``t_ij`` (MW/rad)."""

    def __init__(self, buses: Sequence[BusDescriptor], edges: Iterable[tuple[int, int, float]]):
        self.buses = tuple(buses)
        self.index = {b.id: k for k, b in enumerate(self.buses)}
        if len(self.index) != len(self.buses):
            raise ScenarioError("buses: duplicate bus id")
        merged: dict[tuple[int, int], float] = {}
        for i, j, t in edges:
            if i not in self.index or j not in self.index:
                missing = i if i not in self.index else j
                raise ScenarioError(f"edges: dangling edge ({i}, {j}) references unknown bus {missing}")
            if i == j:
                raise ScenarioError(f"edges: self-loop at bus {i}")
            if not (math.isfinite(t) and t > 0):
                raise ScenarioError(f"edges: stiffness of ({i}, {j}) must be positive")
            key = (min(i, j), max(i, j))
            if key in merged:
                raise ScenarioError(f"edges: duplicate line {key}")
            merged[key] = float(t)
        self.edges = tuple((i, j, t) for (i, j), t in sorted(merged.items()))
        nbrs: dict[int, dict[int, float]] = {b.id: {} for b in self.buses}
        for i, j, t in self.edges:
            nbrs[i][j] = t
            nbrs[j][i] = t
        self._neighbors = {i: dict(sorted(d.items())) for i, d in nbrs.items()}

    def __len__(self) -> int:
        return len(self.buses)

    def bus(self, bus_id: int) -> BusDescriptor:
        return self.buses[self.index[bus_id]]

    def neighbors(self, bus_id: int) -> dict[int, float]:
        """Neighbor id -> stiffness for ``bus_id``."""
        return dict(self._neighbors[bus_id])

    def stiffness_sum(self, bus_id: int) -> float:
        return sum(self._neighbors[bus_id].values())

    def laplacian(self) -> np.ndarray:
        n = len(self.buses)
        L = np.zeros((n, n))
        for i, j, t in self.edges:
            a, b = self.index[i], self.index[j]
            L[a, a] += t
            L[b, b] += t
            L[a, b] -= t
            L[b, a] -= t
        return L

    def desired_flow_sum(self, bus_id: int) -> float:
        th = self.bus(bus_id).theta_star
        return sum(power_flow(th, self.bus(j).theta_star, t) for j, t in self._neighbors[bus_id].items())

    def ids(self, kind: str | None = None) -> list[int]:
        return [b.id for b in self.buses if kind is None or b.kind == kind]


@dataclass(frozen=True)
class WindEvent:
    time_s: float
    bus: int
    action: str


@dataclass(frozen=True)
class IntegratorSettings:
    dt: float = 1e-3
    t_end: float = 150.0
    decimate: int = 100


@dataclass(frozen=True)
class ControllerConfig:
    """Controller selection and gain source.

    ``design`` is ``"manual"`` (use ``gains``) or ``"algorithm"`` (run the
    local gain-design procedure with the scenario's ``delta``).
    """

    solution: str = "robust"
    design: str = "manual"
    gains: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    gamma: float = 0.1
    passive_alpha: float = 0.99


@dataclass(frozen=True)
class Scenario:
    name: str
    topology: NetworkTopology
    setpoint_hz: float = 60.0
    events: tuple[WindEvent, ...] = ()
    integrator: IntegratorSettings = IntegratorSettings()
    controller: ControllerConfig = ControllerConfig()
    bess_time_constant: float | None = 1.0
    delta: float = 0.1
    initial: str = "rest"

    @property
    def buses(self) -> tuple[BusDescriptor, ...]:
        return self.topology.buses

    def counts(self) -> dict[str, int]:
        return {k: len(self.topology.ids(k)) for k in KINDS}

    def with_changes(self, **kw) -> "Scenario":
        from dataclasses import replace

        return replace(self, **kw)


# -- JSON (de)serialization -------------------------------------------------

def _require(obj: Mapping, key: str, where: str):
    if key not in obj:
        raise ScenarioError(f"{where}: missing field '{key}'")
    return obj[key]


def _sinusoids(items, where) -> tuple[Sinusoid, ...]:
    out = []
    for k, it in enumerate(items or ()):
        w = f"{where}[{k}]"
        out.append(Sinusoid(float(_require(it, "amplitude", w)),
                            float(_require(it, "frequency_rad", w)),
                            float(it.get("phase", 0.0))))
    return tuple(out)


def _signal(obj, where) -> SignalSpec:
    return SignalSpec(float(obj.get("constant", 0.0)), _sinusoids(obj.get("terms"), f"{where}.terms"))


def _wind(obj, where) -> ExosystemSpec:
    spec = ExosystemSpec(
        rho_low=tuple(float(r) for r in obj.get("rho_low", ())),
        rho_med=tuple(float(r) for r in obj.get("rho_med", ())),
        psi=tuple(float(v) for v in _require(obj, "psi", where)),
        chi0=tuple(float(v) for v in _require(obj, "chi0", where)),
        rho_max=None if obj.get("rho_max") is None else float(obj["rho_max"]),
        high_freq=_sinusoids(obj.get("high_freq"), f"{where}.high_freq"),
    )
    spec.check(where)
    return spec


def _bus(obj, k) -> BusDescriptor:
    where = f"buses[{k}]"
    kind = _require(obj, "kind", where)
    if kind not in KINDS:
        raise ScenarioError(f"{where}.kind: expected one of {KINDS}, got {kind!r}")
    p = _require(obj, "params", where)
    known = set(BusParams.__dataclass_fields__)
    extra = set(p) - known
    if extra:
        raise ScenarioError(f"{where}.params: unknown field(s) {sorted(extra)}")
    params = BusParams(**{key: float(v) for key, v in p.items()})
    params.check(kind, f"{where}.params")
    wind = _wind(obj["wind"], f"{where}.wind") if obj.get("wind") is not None else None
    demand = _signal(obj["inelastic_demand"], f"{where}.inelastic_demand") \
        if obj.get("inelastic_demand") is not None else None
    if kind == "T" and (wind is not None or demand is not None):
        raise ScenarioError(f"{where}: passive buses carry no wind and no demand")
    im = obj.get("internal_model")
    return BusDescriptor(int(_require(obj, "id", where)), kind, params,
                         float(obj.get("theta_star", 0.0)), wind, demand, im)


def scenario_from_dict(doc: Mapping[str, Any], name: str = "scenario") -> Scenario:
    if not isinstance(doc, Mapping):
        raise ScenarioError("top level: expected an object")
    buses = [_bus(b, k) for k, b in enumerate(_require(doc, "buses", "top level"))]
    edges = []
    for k, e in enumerate(doc.get("edges", [])):
        if isinstance(e, Mapping):
            edges.append((int(_require(e, "from", f"edges[{k}]")), int(_require(e, "to", f"edges[{k}]")),
                          float(_require(e, "t", f"edges[{k}]"))))
        else:
            if len(e) != 3:
                raise ScenarioError(f"edges[{k}]: expected [from, to, t]")
            edges.append((int(e[0]), int(e[1]), float(e[2])))
    topo = NetworkTopology(buses, edges)

    events = []
    for k, ev in enumerate(doc.get("events", [])):
        w = f"events[{k}]"
        action = _require(ev, "action", w)
        if action not in ("wind_connect", "wind_disconnect"):
            raise ScenarioError(f"{w}.action: unknown action {action!r}")
        bus = int(_require(ev, "bus", w))
        if bus not in topo.index:
            raise ScenarioError(f"{w}.bus: unknown bus id {bus}")
        events.append(WindEvent(float(_require(ev, "time_s", w)), bus, action))
    for bus in {e.bus for e in events}:
        times = [e.time_s for e in events if e.bus == bus]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ScenarioError(f"events: times for bus {bus} must be strictly increasing")

    integ = doc.get("integrator", {})
    settings = IntegratorSettings(float(integ.get("dt", 1e-3)), float(integ.get("t_end", 150.0)),
                                  int(integ.get("decimate", 100)))
    if not (settings.dt > 0 and settings.t_end > settings.dt and settings.decimate >= 1):
        raise ScenarioError("integrator: need dt > 0, t_end > dt and decimate >= 1")

    c = doc.get("controller", {})
    if isinstance(c, str):
        c = {"solution": c}
    ctrl = ControllerConfig(
        solution=c.get("solution", "robust"),
        design=c.get("design", "manual"),
        gains={k: tuple(float(x) for x in v) for k, v in c.get("gains", {}).items()},
        gamma=float(c.get("gamma", 0.1)),
        passive_alpha=float(c.get("passive_alpha", 0.99)),
    )
    if ctrl.solution not in ("robust", "adaptive", "baseline"):
        raise ScenarioError(f"controller.solution: unknown controller {ctrl.solution!r}")
    if ctrl.design not in ("manual", "algorithm"):
        raise ScenarioError(f"controller.design: unknown design {ctrl.design!r}")

    T = doc.get("bess_time_constant", 1.0)
    if T is not None and not float(T) > 0:
        raise ScenarioError("bess_time_constant: must be positive or null")
    delta = float(doc.get("delta", 0.1))
    if not delta > 0:
        raise ScenarioError("delta: must be positive")
    initial = doc.get("initial", "rest")
    if initial not in ("rest", "manifold"):
        raise ScenarioError(f"initial: expected 'rest' or 'manifold', got {initial!r}")
    return Scenario(doc.get("name", name), topo, float(doc.get("setpoint_hz", 60.0)), tuple(events),
                    settings, ctrl, None if T is None else float(T), delta, initial)


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario JSON file."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(doc, name=path.stem)


def _sin_list(terms):
    return [{"amplitude": s.amplitude, "frequency_rad": s.frequency_rad, "phase": s.phase} for s in terms]


def scenario_to_dict(sc: Scenario) -> dict[str, Any]:
    buses = []
    for b in sc.buses:
        p = {k: v for k, v in vars(b.params).items() if v is not None}
        d: dict[str, Any] = {"id": b.id, "kind": b.kind, "params": p, "theta_star": b.theta_star}
        if b.wind is not None:
            w = b.wind
            d["wind"] = {"rho_low": list(w.rho_low), "rho_med": list(w.rho_med), "psi": list(w.psi),
                         "chi0": list(w.chi0), "rho_max": w.rho_max, "high_freq": _sin_list(w.high_freq)}
        if b.inelastic_demand is not None:
            d["inelastic_demand"] = {"constant": b.inelastic_demand.constant,
                                     "terms": _sin_list(b.inelastic_demand.terms)}
        if b.internal_model is not None:
            d["internal_model"] = b.internal_model
        buses.append(d)
    c = sc.controller
    return {
        "name": sc.name,
        "buses": buses,
        "edges": [[i, j, t] for i, j, t in sc.topology.edges],
        "setpoint_hz": sc.setpoint_hz,
        "events": [{"time_s": e.time_s, "bus": e.bus, "action": e.action} for e in sc.events],
        "integrator": {"dt": sc.integrator.dt, "t_end": sc.integrator.t_end,
                       "decimate": sc.integrator.decimate},
        "controller": {"solution": c.solution, "design": c.design,
                       "gains": {k: list(v) for k, v in c.gains.items()},
                       "gamma": c.gamma, "passive_alpha": c.passive_alpha},
        "bess_time_constant": sc.bess_time_constant,
        "delta": sc.delta,
        "initial": sc.initial,
    }


def save_scenario(sc: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(sc), indent=1))


# -- assumption diagnostics -------------------------------------------------

@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    passed: bool
    offending: tuple[int, ...] = ()
    detail: str = ""


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple[AssumptionCheck, ...]

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            tag = "PASS" if c.passed else "FAIL"
            extra = f" buses={list(c.offending)}" if c.offending else ""
            out.append(f"{tag} {c.name}{extra} {c.detail}".rstrip())
        return out


def validate_assumptions(sc: Scenario, tol: float = 1e-9) -> AssumptionReport:
    topo = sc.topology
    passive = topo.ids("T")
    unbalanced = tuple(i for i in passive if abs(topo.desired_flow_sum(i)) > tol)
    weak = tuple(i for i in passive if not topo.bus(i).params.D > topo.stiffness_sum(i))
    # closed-form sinusoid sums are smooth; anything else cannot be represented
    non_smooth = tuple(b.id for b in sc.buses if b.inelastic_demand is not None
                       and not isinstance(b.inelastic_demand, SignalSpec))
    unobservable = []
    for b in sc.buses:
        if b.wind is not None:
            from .internal_model import check_observability

            if not check_observability(b.wind.Psi, b.wind.Phi):
                unobservable.append(b.id)
    return AssumptionReport((
        AssumptionCheck("passive_flow_balance", not unbalanced, unbalanced,
                        "sum of desired flows at passive buses"),
        AssumptionCheck("passive_damping_dominance", not weak, weak,
                        "D_i > sum_j t_ij at passive buses"),
        AssumptionCheck("demand_twice_differentiable", not non_smooth, non_smooth),
        AssumptionCheck("wind_observable", not unobservable, tuple(unobservable)),
    ))


def random_scenario(seed, n_max: int = 12, n_min: int = 2, design: str = "algorithm",
                    solution: str = "robust") -> Scenario:
    """Random connected network for property checks.

    A random spanning tree plus a few chords, at least one generator, wind
    at every controlled bus (one or two bands at loads) and passive buses
    whose damping exceeds their stiffness sum.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(n_min, n_max + 1))
    kinds = list(rng.choice(KINDS, size=n, p=[0.35, 0.35, 0.3]))
    kinds[0] = "G"
    edges = {}
    for i in range(1, n):
        j = int(rng.integers(0, i))
        edges[(j, i)] = float(rng.uniform(0.5, 2.0))
    for _ in range(int(rng.integers(0, n))):
        i, j = sorted(int(v) for v in rng.choice(n, size=2, replace=False))
        edges.setdefault((i, j), float(rng.uniform(0.5, 2.0)))
    st = np.zeros(n)
    for (i, j), t in edges.items():
        st[i] += t
        st[j] += t
    buses = []
    for i, kind in enumerate(kinds):
        m = float(rng.uniform(5.0, 15.0))
        if kind == "T":
            params = {"m": m, "D": float(st[i] * rng.uniform(1.1, 3.0))}
            buses.append({"id": i + 1, "kind": "T", "params": params})
            continue
        params = {"m": m, "D": float(rng.uniform(0.5, 2.0)), "b_prime": 40.0, "c_prime": -0.8, "tau": 150.0}
        if kind == "G":
            params.update(T_CH=float(rng.uniform(0.2, 0.5)), T_G=float(rng.uniform(0.1, 0.3)),
                          R=float(rng.uniform(0.03, 0.08)))
            wind = {"rho_low": [0.1], "rho_med": [], "psi": [10.0, 0.0], "chi0": [0.0, 3.0]}
        elif rng.random() < 0.5:
            wind = {"rho_low": [0.1], "rho_med": [0.2], "psi": [10.0, 0.0, 10.0, 0.0], "chi0": [0.0, 3.0, 0.0, 8.0]}
        else:
            wind = {"rho_low": [0.1], "rho_med": [], "psi": [10.0, 0.0], "chi0": [0.0, 3.0]}
        bus = {"id": i + 1, "kind": kind, "params": params, "wind": wind}
        if kind == "L":
            bus["inelastic_demand"] = {"constant": 100.0, "terms": [{"amplitude": 50.0, "frequency_rad": 0.01}]}
        buses.append(bus)
    doc = {
        "name": f"random-{seed}",
        "buses": buses,
        "edges": [[i + 1, j + 1, t] for (i, j), t in sorted(edges.items())],
        "controller": {"solution": solution, "design": design},
    }
    return scenario_from_dict(doc)
