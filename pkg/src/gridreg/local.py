"""Per-bus data handed to controllers and the locality-restricted view.

A controller at bus ``i`` may read its own state, its own internal-model
state, its own exogenous demand signal and the phase angles of its direct
neighbors. :class:`LocalView` exposes exactly that and nothing else.
"""
from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .grid import BusDescriptor, BusParams, NetworkTopology, SignalSpec
from .internal_model import InternalModelSpec

# raw state columns per bus kind and solution
RAW_COLUMNS = {
    ("G", "robust"): ("delta", "w", "P_M", "P_v", "P_E"),
    ("G", "adaptive"): ("delta", "w", "P_M", "P_E"),
    ("L", "robust"): ("delta", "w", "P_E"),
    ("L", "adaptive"): ("delta", "w", "P_E"),
    ("T", "robust"): ("delta", "w"),
    ("T", "adaptive"): ("delta", "w"),
}


def raw_columns(kind: str, solution: str) -> tuple[str, ...]:
    return RAW_COLUMNS[(kind, "adaptive" if solution == "adaptive" else "robust")]


class LocalityError(LookupError):
    """A controller asked for data outside its neighborhood."""


@dataclass(frozen=True, eq=False)
class LocalBus:
    """Everything bus ``id`` knows about itself."""

    id: int
    kind: str
    params: BusParams
    sum_t: float
    flows_star: float
    theta_star: float
    w_star: float
    demand: SignalSpec
    spec: InternalModelSpec | None
    neighbors: Mapping[int, float]

    @property
    def ell(self) -> int:
        return 0 if self.spec is None else self.spec.ell

    @classmethod
    def from_topology(cls, topo: NetworkTopology, bus_id: int, w_star: float,
                      spec: InternalModelSpec | None = None) -> "LocalBus":
        b: BusDescriptor = topo.bus(bus_id)
        return cls(b.id, b.kind, b.params, topo.stiffness_sum(b.id), topo.desired_flow_sum(b.id),
                   b.theta_star, w_star, b.demand, spec, MappingProxyType(topo.neighbors(b.id)))


class LocalView:
    """Frozen snapshot of the measurements available at one bus.

    ``state`` maps the raw column names of the bus to values, ``eta`` is
    the local internal-model state and ``t`` the time. Neighbor phase
    angles are served by :meth:`theta`; any other bus id raises
    :class:`LocalityError`.
    """

    __slots__ = ("_bus", "_state", "_eta", "_t", "_nbr")

    def __init__(self, bus: LocalBus, state: Mapping[str, float], eta, t: float,
                 neighbor_delta: Mapping[int, float]):
        extra = set(neighbor_delta) - set(bus.neighbors)
        if extra:
            raise LocalityError(f"bus {bus.id}: buses {sorted(extra)} are not neighbors")
        object.__setattr__(self, "_bus", bus)
        object.__setattr__(self, "_state", MappingProxyType(dict(state)))
        e = np.array(eta, dtype=float)
        e.setflags(write=False)
        object.__setattr__(self, "_eta", e)
        object.__setattr__(self, "_t", float(t))
        object.__setattr__(self, "_nbr", MappingProxyType(dict(neighbor_delta)))

    def __setattr__(self, name, value):
        raise AttributeError("LocalView is read-only")

    @property
    def bus(self) -> LocalBus:
        return self._bus

    @property
    def t(self) -> float:
        return self._t

    @property
    def eta(self) -> np.ndarray:
        return self._eta

    def __getitem__(self, name: str) -> float:
        return self._state[name]

    def theta(self, bus_id: int) -> float:
        """Rotating-frame phase of bus ``bus_id`` (own bus or a neighbor)."""
        if bus_id == self._bus.id:
            return self._state["delta"]
        if bus_id not in self._nbr:
            raise LocalityError(f"bus {self._bus.id} cannot observe bus {bus_id}")
        return self._nbr[bus_id]

    def flows_sum(self) -> float:
        d = self._state["delta"]
        return sum(t * (d - self._nbr[j]) for j, t in self._bus.neighbors.items())

    def raw(self, columns) -> np.ndarray:
        return np.array([self._state[c] for c in columns])

    def demand(self):
        """Inelastic demand and its first two derivatives at ``t``."""
        v, d1, d2 = self._bus.demand.derivatives(self._t)
        return float(v), float(d1), float(d2)
