"""Fixed-step simulation runs, the comparison experiment and CSV export."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import Scenario
from .adaptive import control_law_s2
from .local import LocalityError, LocalView, raw_columns
from .network import ClosedLoop, designs_for
from .plant import BessState, IntegrationError, bess_rhs, rk4_step
from .robust import baseline_control, control_law_s1

RMS_WINDOW = (60.0, 110.0)
RMS_FLOOR = 1e-9


@dataclass
class RunRecord:
    """Decimated trajectory of one run.

    Per-bus arrays have shape ``(samples, buses)``; quantities a bus does
    not have (``P_M`` at a load, ``P_E`` at a passive bus) are NaN.
    ``inputs`` has two columns per bus (``P_ref``/``P_v`` and the price at
    a generator, the price at a load).
    """

    t: np.ndarray
    bus_ids: list[int]
    w: np.ndarray
    theta_dev: np.ndarray
    P_M: np.ndarray
    P_v: np.ndarray
    P_E: np.ndarray
    xhat_norm: np.ndarray
    eta_error: np.ndarray
    inputs: np.ndarray
    events: list[tuple[float, int, str]] = field(default_factory=list)
    box_margin: float = -math.inf
    solution: str = "robust"
    scenario: str = ""
    dt: float = 1e-3

    def __post_init__(self):
        n, nb = self.t.size, len(self.bus_ids)
        if n > 2:
            h = np.diff(self.t)
            if np.max(np.abs(h - h[0])) > 1e-9 * max(1.0, abs(self.t[-1])):
                raise ValueError("time grid is not uniform")
        for name in ("w", "theta_dev", "P_M", "P_v", "P_E"):
            if getattr(self, name).shape != (n, nb):
                raise ValueError(f"{name} does not match the topology")

    def bus(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)

    def window(self, t0: float, t1: float) -> np.ndarray:
        return (self.t >= t0) & (self.t <= t1)


def _locate(loop: ClosedLoop, index: int | None) -> int | None:
    """Bus owning state component ``index`` (exosystem states map to their wind bus)."""
    if index is None:
        return None
    for k, sl in enumerate(loop.slices):
        if sl["raw"].start <= index < max(sl["raw"].stop, sl["eta"].stop, sl["tinv"].stop):
            return loop.bus_ids[k]
    for i, k in enumerate(loop.wind_pos):
        sl = loop.chi_slices[i]
        if sl.start <= index < sl.stop or (loop.y_index and loop.y_index[i] == index):
            return loop.bus_ids[k]
    return None


class _Recorder:
    def __init__(self, loop: ClosedLoop, n: int):
        nb = loop.nbus
        self.loop = loop
        self.t = np.empty(n)
        self.arr = {k: np.full((n, nb), np.nan) for k in ("w", "theta_dev", "P_M", "P_v", "P_E")}
        self.xhat = np.empty(n)
        self.eta = np.empty(n)
        self.inputs = np.full((n, nb, 2), np.nan)
        self.box = -math.inf
        self.k = 0
        self.theta_star = np.array([lb.theta_star for lb in loop.local])
        cols = "adaptive" if loop.adaptive else "robust"
        self.cols = []
        for lb, sl in zip(loop.local, loop.slices):
            c = raw_columns(lb.kind, cols)
            self.cols.append({name: sl["raw"].start + j for j, name in enumerate(c)})

    def __call__(self, t: float, z):
        L, k = self.loop, self.k
        self.t[k] = t
        self.arr["w"][k] = z[L.w_idx]
        self.arr["theta_dev"][k] = z[L.delta_idx] - self.theta_star
        for b, c in enumerate(self.cols):
            for name in ("P_M", "P_v", "P_E"):
                if name in c:
                    self.arr[name][k, b] = z[c[name]]
        # the baseline hat coordinates carry no internal-model block
        self.xhat[k] = np.linalg.norm(L.hat(t, z))
        tg = L.target(t, z)
        err = [z[L.slices[p]["eta"]] - v for p, v in zip(L.wind_pos, tg)]
        self.eta[k] = np.linalg.norm(np.concatenate(err)) if err else 0.0
        for b, u in enumerate(L.inputs(t, z)):
            self.inputs[k, b, :len(u)] = u
        if L.estimating:
            self.box = max(self.box, box_violation(L, z))
        self.k += 1


def box_violation(loop: ClosedLoop, z) -> float:
    """Largest excess of ``|psi_k t_kl|`` over the projection bound."""
    worst = -math.inf
    for g in loop.groups:
        if g.kind == "T" or not g.ell:
            continue
        p = 2 * g.ell
        T = z[g.tinv_idx].reshape(-1, p, p)
        v = np.abs(g.ctrl.Psi[:, :, None] * T) - np.asarray(g.ctrl.box).reshape(-1, 1, 1)
        worst = max(worst, float(v.max()))
    return worst


def run(scenario: Scenario, controller: str | None = None, *, dt: float | None = None,
        t_end: float | None = None, decimate: int | None = None, designs=None,
        initial: str | None = None) -> RunRecord:
    """Integrate the closed loop with classical RK4 on a uniform grid.

    The wind connection gate is read at the start of every step and held
    over it. Non-estimating loops are compiled to their exact affine form
    first; the adaptive loop is integrated directly and its estimate is
    clamped into the projection box after every step.
    """
    solution = scenario.controller.solution if controller is None else controller
    dt = scenario.integrator.dt if dt is None else float(dt)
    t_end = scenario.integrator.t_end if t_end is None else float(t_end)
    dec = scenario.integrator.decimate if decimate is None else int(decimate)
    if not (dt > 0 and t_end > 0 and dec >= 1):
        raise ValueError("need dt > 0, t_end > 0 and decimate >= 1")
    if designs is None:
        designs = designs_for(scenario, solution)
    loop = ClosedLoop(scenario, solution, designs)
    field_fn = loop.compile_affine().field if not loop.estimating else loop.field
    z = loop.initial_state(initial)
    n_steps = int(round(t_end / dt))
    rec = _Recorder(loop, n_steps // dec + 1)
    rec(0.0, z)
    has_wind = bool(loop.wind_pos)
    # overflow is reported through IntegrationError, not numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        _integrate(loop, field_fn, z, n_steps, dt, dec, rec, has_wind)
    k = rec.k
    ev = sorted((e.time_s, e.bus, e.action) for e in scenario.events)
    return RunRecord(rec.t[:k], list(loop.bus_ids), rec.arr["w"][:k], rec.arr["theta_dev"][:k],
                     rec.arr["P_M"][:k], rec.arr["P_v"][:k], rec.arr["P_E"][:k], rec.xhat[:k],
                     rec.eta[:k], rec.inputs[:k], ev, rec.box, solution, scenario.name, dt)


def _integrate(loop, field_fn, z, n_steps, dt, dec, rec, has_wind):
    for n in range(n_steps):
        t = n * dt
        gate = loop.gate(t) if has_wind else None

        def f(tt, zz, _g=gate):
            return field_fn(tt, zz, _g)

        try:
            z = rk4_step(f, z, t, dt)
        except IntegrationError as exc:
            bus = _locate(loop, exc.index)
            raise IntegrationError(f"integration failed at t={t + dt:.6g} (bus {bus})", time=t + dt,
                                   bus=bus, index=exc.index) from exc
        z = loop.post_step(z)
        if (n + 1) % dec == 0:
            rec((n + 1) * dt, z)


# -- comparison -----------------------------------------------------------------------

@dataclass
class Comparison:
    robust: RunRecord
    baseline: RunRecord
    rms_robust: float
    rms_baseline: float
    window: tuple[float, float]

    @property
    def ratio(self) -> float:
        if self.rms_baseline < RMS_FLOOR and self.rms_robust < RMS_FLOOR:
            return 1.0
        return self.rms_robust / self.rms_baseline if self.rms_baseline > 0 else math.inf


def frequency_rms(rec: RunRecord, w_star: float, window=RMS_WINDOW) -> float:
    m = rec.window(*window)
    if not m.any():
        raise ValueError(f"no samples in the window {window}")
    return float(np.sqrt(np.mean((rec.w[m] - w_star) ** 2)))


def compare(scenario: Scenario, window=RMS_WINDOW, **kw) -> Comparison:
    """Internal-model controller against the baseline on identical inputs."""
    a = run(scenario, "robust", **kw)
    b = run(scenario, "baseline", **kw)
    ws = scenario.setpoint_hz
    return Comparison(a, b, frequency_rms(a, ws, window), frequency_rms(b, ws, window), tuple(window))


# -- locality audit -------------------------------------------------------------------

@dataclass
class LocalityAudit:
    checked: int
    violations: list[str]

    @property
    def passed(self) -> bool:
        return self.checked > 0 and not self.violations


def local_view(loop: ClosedLoop, k: int, t: float, z) -> LocalView:
    """The measurements bus ``loop.local[k]`` is entitled to at state ``z``."""
    lb, sl = loop.local[k], loop.slices[k]
    cols = raw_columns(lb.kind, loop.solution)
    state = dict(zip(cols, z[sl["raw"]]))
    pos = {b: i for i, b in enumerate(loop.bus_ids)}
    nbr = {j: float(z[loop.delta_idx[pos[j]]]) for j in lb.neighbors}
    return LocalView(lb, state, z[sl["eta"]], t, nbr)


def locality_audit(scenario: Scenario, solution: str = "robust", seed: int = 0,
                   t: float = 3.0) -> LocalityAudit:
    """Check that every controller is a function of its local view only.

    Three checks per controlled bus: the per-bus law evaluated on a
    :class:`LocalView` reproduces the network input; scrambling every state
    outside the bus and its neighbors (including the hidden exosystem and
    storage states) leaves the input bit-for-bit unchanged; and a view
    listing a non-neighbor cannot be constructed.
    """
    loop = ClosedLoop(scenario, solution)
    rng = np.random.default_rng(seed)
    z = loop.initial_state("rest") + rng.normal(scale=0.1, size=loop.nz)
    z = loop.post_step(z)
    ref = loop.inputs(t, z)
    pos = {b: i for i, b in enumerate(loop.bus_ids)}
    bad: list[str] = []
    checked = 0
    for k, lb in enumerate(loop.local):
        if lb.kind == "T":
            continue
        checked += 1
        view = local_view(loop, k, t, z)
        gains = loop.designs[lb.id].gains
        if solution == "adaptive":
            g = next(g for g in loop.groups if k in g.pos)
            That = loop._estimate(g, z)[list(g.pos).index(k)]
            rho = loop.topo.bus(lb.id).wind.rho_ceiling if lb.ell else 0.0
            u, _ = control_law_s2(view, gains, That, rho, scenario.controller.gamma)
        elif solution == "baseline":
            u = baseline_control(view, gains)
        else:
            u = control_law_s1(view, gains)
        if not np.allclose(u, ref[k], rtol=1e-9, atol=1e-9):
            bad.append(f"bus {lb.id}: per-bus law {u} differs from network input {ref[k]}")
        # scramble everything the bus may not see
        keep = np.zeros(loop.nz, dtype=bool)
        own = loop.slices[k]
        for key in ("raw", "eta", "tinv"):
            keep[own[key]] = True
        for j in lb.neighbors:
            keep[loop.delta_idx[pos[j]]] = True
        z2 = z.copy()
        z2[~keep] += rng.normal(scale=10.0, size=int((~keep).sum()))
        if loop.inputs(t, z2)[k] != ref[k]:
            bad.append(f"bus {lb.id}: input changes with non-local states")
        others = [b for b in loop.bus_ids if b != lb.id and b not in lb.neighbors]
        if others:
            try:
                cols = raw_columns(lb.kind, solution)
                LocalView(lb, dict(zip(cols, view.raw(cols))), view.eta, t, {others[0]: 0.0})
                bad.append(f"bus {lb.id}: view accepted non-neighbor {others[0]}")
            except LocalityError:
                pass
            try:
                view.theta(others[0])
                bad.append(f"bus {lb.id}: view served non-neighbor {others[0]}")
            except LocalityError:
                pass
    return LocalityAudit(checked, bad)


# -- storage filter ---------------------------------------------------------------------

def filter_gain(omega: float, T: float = 1.0, dt: float = 1e-3, periods: int = 5) -> float:
    """Measured steady-state gain of the storage filter driven by ``sin(omega t)``.

    The filter is integrated with RK4 through ``10 T`` plus ``periods``
    full periods; amplitude is fitted by least squares on the last
    ``periods`` periods.
    """
    if not (omega > 0 and T > 0):
        raise ValueError("need omega > 0 and T > 0")
    period = 2 * math.pi / omega
    n_settle = int(math.ceil(10 * T / dt))
    n_meas = int(round(periods * period / dt))
    ts, ys = [], []

    def f(t, x):
        return np.array([bess_rhs(BessState(float(x[0]), T), math.sin(omega * t))])

    x = np.zeros(1)
    for n in range(n_settle + n_meas):
        x = rk4_step(f, x, n * dt, dt)
        if n + 1 > n_settle:
            ts.append((n + 1) * dt)
            ys.append(x[0])
    ts, ys = np.array(ts), np.array(ys)
    X = np.column_stack([np.sin(omega * ts), np.cos(omega * ts), np.ones_like(ts)])
    a, b, _ = np.linalg.lstsq(X, ys, rcond=None)[0]
    return float(math.hypot(a, b))


# -- CSV --------------------------------------------------------------------------------

def _fmt(v: float) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return format(float(v), ".9g")


def csv_header(rec: RunRecord) -> list[str]:
    cols = ["t"]
    for b in rec.bus_ids:
        cols += [f"bus{b}_w", f"bus{b}_theta_dev", f"bus{b}_P_M", f"bus{b}_P_v", f"bus{b}_P_E",
                 f"bus{b}_u1", f"bus{b}_u2"]
    return cols + ["xhat_norm"]


def export_csv(rec: RunRecord, path, decimate: int = 1) -> None:
    """Write the record with 9 significant digits, every ``decimate``-th row."""
    if decimate < 1:
        raise ValueError("decimate must be >= 1")
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(csv_header(rec))
    for k in range(0, rec.t.size, decimate):
        row = [_fmt(rec.t[k])]
        for b in range(len(rec.bus_ids)):
            row += [_fmt(rec.w[k, b]), _fmt(rec.theta_dev[k, b]), _fmt(rec.P_M[k, b]), _fmt(rec.P_v[k, b]),
                    _fmt(rec.P_E[k, b]), _fmt(rec.inputs[k, b, 0]), _fmt(rec.inputs[k, b, 1])]
        row.append(_fmt(rec.xhat_norm[k]))
        wr.writerow(row)
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]])
