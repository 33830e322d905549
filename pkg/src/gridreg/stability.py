"""Small-gain certificates for the networked closed loop.

The network is cut into scalar subsystems: every transformed stage of a
controlled bus, the internal-model block of that bus and the two-state
block of each passive bus. For a node ``u`` with self dynamics ``A_uu`` and
couplings ``b_g`` from the other nodes, a quadratic ISS-Lyapunov function
gives

    |x_u(t)| <= max{ beta_u(|x_u(t0)|, t - t0), sum_g c_g sup |x_g| }

and bounding the sum by its total weight gives the linear gain
``gamma_uv(s) = (sum_g c_g) s`` on every incoming edge: the ratio of the
off-diagonal coupling to the local decay rate, divided by ``alpha < 1``.
When ``A_uu`` has a negative definite symmetric part ``-k`` the weights
are ``c_g = |b_g| / (alpha k)`` and ``beta_u(s, t) = s exp(-(1 - alpha) k t)``;
otherwise the Lyapunov matrix ``P`` of ``A_uu`` is used and the condition
number of ``P`` enters both. A passive bus receives the gain
``sum t_ij / (alpha D_i)`` from each neighbor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla

SLACK = 1e-12
DEFAULT_SAMPLES = np.logspace(-6, 6, 256)


# -- gain functions -------------------------------------------------------------

@dataclass(frozen=True)
class LinearGain:
    """``gamma(s) = c s``."""

    c: float

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c >= 0):
            raise ValueError(f"linear gain needs a finite c >= 0, got {self.c}")

    def __call__(self, s):
        return self.c * np.asarray(s, dtype=float)


@dataclass(frozen=True)
class TabulatedGain:
    """Monotone gain sampled on a grid, linear interpolation in between and
    linear extrapolation through the origin below the first sample."""

    s: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if s.ndim != 1 or s.shape != v.shape or s.size < 2:
            raise ValueError("gain table needs matching 1-d sample arrays")
        if np.any(s <= 0) or np.any(np.diff(s) <= 0):
            raise ValueError("gain table samples must be positive and increasing")
        if np.any(v < 0) or np.any(np.diff(v) < 0):
            raise ValueError("gain is not class-K: values must be nonnegative and nondecreasing")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, fn: Callable, samples=DEFAULT_SAMPLES) -> "TabulatedGain":
        if float(np.asarray(fn(0.0))) != 0.0:
            raise ValueError("gain is not class-K: gamma(0) != 0")
        s = np.asarray(samples, dtype=float)
        return cls(s, np.array([float(fn(x)) for x in s]))

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        lo = self.values[0] / self.s[0] * s
        return np.where(s < self.s[0], lo, np.interp(s, self.s, self.values))


Gain = LinearGain | TabulatedGain


@dataclass(frozen=True)
class ExpKL:
    """``beta(s, t) = scale * s * exp(-rate t)``; the form ``a^-p(t) r(s)``
    with ``a = e``, ``p(t) = rate t`` and ``r(s) = scale s``."""

    scale: float
    rate: float

    def __post_init__(self):
        if not (self.scale >= 1.0 and self.rate > 0):
            raise ValueError("exponential KL bound needs scale >= 1 and rate > 0")

    def __call__(self, s, t):
        return self.scale * np.asarray(s, dtype=float) * np.exp(-self.rate * np.asarray(t, dtype=float))


# -- the gain graph -----------------------------------------------------------------

@dataclass(frozen=True)
class GainGraph:
    """Nodes, incoming gains ``edges[(u, v)]`` (influence of ``v`` on ``u``),
    per-node disturbance gains and per-node KL bounds."""

    nodes: tuple
    edges: Mapping[tuple, Gain]
    beta: Mapping[Hashable, Callable] = field(default_factory=dict)
    disturbance: Mapping[Hashable, Gain] = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.nodes)
        if len(known) != len(self.nodes):
            raise ValueError("duplicate node labels")
        for (u, v), g in self.edges.items():
            if u not in known or v not in known:
                raise ValueError(f"edge ({u!r}, {v!r}) references an unknown node")
            if u == v:
                raise ValueError("self-loops are not gains")
            _check_class_k(g)
        for g in self.disturbance.values():
            _check_class_k(g)

    def in_edges(self, u):
        return {v: g for (a, v), g in self.edges.items() if a == u}


def _check_class_k(g) -> None:
    if isinstance(g, (LinearGain, TabulatedGain)):
        return  # validated at construction
    s = np.concatenate([[0.0], DEFAULT_SAMPLES])
    v = np.array([float(g(x)) for x in s])
    if v[0] != 0 or np.any(np.diff(v) < 0):
        raise ValueError("gain is not class-K on the sample grid")


def check_contraction(graph: GainGraph, samples=None) -> dict[tuple, bool]:
    """Per-edge verdict: ``gamma(s) < s`` for all ``s > 0``.

    Linear gains are decided by ``c < 1``; any other gain is checked on the
    sample grid with a relative slack of ``1e-12``.
    """
    s = DEFAULT_SAMPLES if samples is None else np.asarray(samples, dtype=float)
    if s.size == 0 or np.any(s <= 0):
        raise ValueError("sample grid must be positive and nonempty")
    out = {}
    for e, g in graph.edges.items():
        if isinstance(g, LinearGain):
            out[e] = bool(g.c < 1.0)
        else:
            out[e] = bool(np.all(np.asarray(g(s)) < s * (1.0 - SLACK)))
    return out


# -- composite KL bound ----------------------------------------------------------------

@dataclass(frozen=True)
class CompositeBeta:
    """``beta(x, t) = n sum_i beta_i(n sum_k beta_k(x, 0), t / (2L)^(n-1))``."""

    betas: tuple
    L: float

    @property
    def n(self) -> int:
        return len(self.betas)

    @property
    def time_scale(self) -> float:
        """``(2L)^(n-1)``, ``inf`` once it leaves the float range."""
        e = (self.n - 1) * math.log(2 * self.L)
        return math.exp(e) if e < 700 else math.inf

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        n = self.n
        inner = n * sum(b(x, 0.0) for b in self.betas)
        tau = t / self.time_scale
        return n * sum(b(inner, tau) for b in self.betas)

    def params(self) -> dict:
        d = {"L": self.L, "nodes": self.n, "time_scale": self.time_scale}
        if all(isinstance(b, ExpKL) for b in self.betas):
            d["scales"] = [b.scale for b in self.betas]
            d["rates"] = [b.rate for b in self.betas]
        return d


def beta_candidate(graph: GainGraph, L: float) -> CompositeBeta:
    """Composite class-KL bound of the network from the node bounds."""
    if not L > 1:
        raise ValueError(f"L must exceed 1, got {L}")
    missing = [u for u in graph.nodes if u not in graph.beta]
    if missing:
        raise ValueError(f"nodes without a KL bound: {missing[:5]}")
    return CompositeBeta(tuple(graph.beta[u] for u in graph.nodes), float(L))


# -- trajectory check ----------------------------------------------------------------------

@dataclass(frozen=True)
class ISSReport:
    margins: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(self.margins >= 0))

    @property
    def min_margin(self) -> float:
        return float(np.min(self.margins))


def verify_iss_bound(times, norms, beta, gamma_d=None, disturbance=None, rtol: float = 1e-9) -> ISSReport:
    """Margins ``max{beta(|x(t0)|, t - t0), gamma_d(sup |d|)} - |x(t)|`` per sample.

    ``times`` must be a uniform grid; ``norms`` and the optional
    ``disturbance`` norms must be sampled on it.
    """
    t = np.asarray(times, dtype=float)
    x = np.asarray(norms, dtype=float)
    if t.ndim != 1 or x.shape != t.shape:
        raise ValueError("grid mismatch: trajectory and time grid differ in shape")
    if t.size > 2:
        h = np.diff(t)
        if np.max(np.abs(h - h[0])) > rtol * max(abs(h[0]), abs(t[-1])):
            raise ValueError("grid mismatch: time samples are not uniform")
    bound = np.asarray(beta(x[0], t - t[0]), dtype=float)
    if disturbance is not None:
        d = np.asarray(disturbance, dtype=float)
        if d.shape != t.shape:
            raise ValueError("grid mismatch: disturbance and time grid differ in shape")
        if gamma_d is None:
            raise ValueError("a disturbance needs its gain")
        bound = np.maximum(bound, np.asarray(gamma_d(np.maximum.accumulate(d)), dtype=float))
    return ISSReport(bound - x)


# -- gain graph of a closed loop ----------------------------------------------------------------

def _nodes(loop):
    sizes = loop.hat_sizes()
    out = []
    off = 0
    for lb, n in zip(loop.local, sizes):
        if lb.kind == "T":
            out.append(((lb.id, "T"), np.arange(off, off + n), lb))
        else:
            ns = n - 2 * lb.ell
            out.extend(((lb.id, l + 1), np.array([off + l]), lb) for l in range(ns))
            if lb.ell:
                out.append(((lb.id, "eta"), np.arange(off + ns, off + n), lb))
        off += n
    return out


def _local_bound(Auu, alpha):
    """Weight map ``b -> c`` and the KL bound of one node."""
    n = Auu.shape[0]
    mu = -float(np.linalg.eigvalsh(0.5 * (Auu + Auu.T)).max())
    if mu > 0:
        return (lambda b: np.linalg.norm(b, 2) / (alpha * mu)), ExpKL(1.0, (1 - alpha) * mu)
    P = sla.solve_continuous_lyapunov(Auu.T, -np.eye(n))
    ev = np.linalg.eigvalsh(0.5 * (P + P.T))
    if ev.min() <= 0:
        raise ValueError("local block is not Hurwitz")
    kp = math.sqrt(ev.max() / ev.min())
    return (lambda b: kp * 2 * np.linalg.norm(P @ b, 2) / alpha), ExpKL(kp, (1 - alpha) / (2 * ev.max()))


def gain_graph(loop, A=None, alpha: float | None = None, tol: float = 1e-12) -> GainGraph:
    """Gain graph of a closed loop from its hat-coordinate matrix."""
    from .network import assemble_A

    A = assemble_A(loop) if A is None else np.asarray(A, dtype=float)
    alpha = loop.scenario.controller.passive_alpha if alpha is None else float(alpha)
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    nodes = _nodes(loop)
    edges, betas = {}, {}
    for key, R, lb in nodes:
        Auu = A[np.ix_(R, R)]
        row_scale = max(1.0, float(np.abs(A[R]).max()))
        srcs = []
        for key2, R2, _ in nodes:
            if key2 == key:
                continue
            b = A[np.ix_(R, R2)]
            if np.abs(b).max() > tol * row_scale:
                srcs.append((key2, b))
        weight, beta = _local_bound(Auu, alpha)
        betas[key] = beta
        if lb.kind == "T":
            c = lb.sum_t / (alpha * lb.params.D)
        else:
            c = float(sum(weight(b) for _, b in srcs))
        for key2, _ in srcs:
            edges[(key, key2)] = LinearGain(c)
    return GainGraph(tuple(k for k, _, _ in nodes), edges, betas)


@dataclass(frozen=True)
class ISSCertificate:
    verdicts: dict
    beta: CompositeBeta
    residuals: tuple = ()

    @property
    def contraction(self) -> bool:
        return all(self.verdicts.values())

    @property
    def passed(self) -> bool:
        return self.contraction and all(r.passed for r in self.residuals)

    def worst_edges(self, graph: GainGraph, k: int = 5):
        lin = [(g.c, e) for e, g in graph.edges.items() if isinstance(g, LinearGain)]
        return sorted(lin, key=lambda p: p[0], reverse=True)[:k]

    def to_dict(self) -> dict:
        return {
            "contraction": self.contraction,
            "edges": len(self.verdicts),
            "failed_edges": [[str(u), str(v)] for (u, v), ok in self.verdicts.items() if not ok],
            "beta": self.beta.params(),
            "margins": [r.min_margin for r in self.residuals],
            "passed": self.passed,
        }


def certify(graph: GainGraph, L: float = 2.0,
            trajectories: Sequence[tuple] = ()) -> ISSCertificate:
    """Contraction verdicts, composite bound and margins on ``(times, norms)``
    trajectories."""
    verdicts = check_contraction(graph)
    beta = beta_candidate(graph, L)
    res = tuple(verify_iss_bound(t, x, beta) for t, x in trajectories)
    return ISSCertificate(verdicts, beta, res)
