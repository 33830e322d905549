"""Regenerate the shipped 68-bus scenarios from a tops-style case module.

usage: python3 tools/build_ieee68.py path/to/ieee68.py

Buses are relabelled so that the sixteen generator buses take ids 53-68
and the network buses take ids 1-52. The 24 buses with the largest active
load become demand-responsive load buses; the remaining network buses are
passive.
"""
import importlib.util
import json
import sys
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "gridreg" / "scenarios"

GEN = {"m": 10.0, "D": 1.0, "T_CH": 0.3, "T_G": 0.2, "R": 0.05, "b_prime": 40.0, "c_prime": -0.8, "tau": 150.0}
LOAD = {"m": 10.0, "D": 1.0, "b_prime": 40.0, "c_prime": -0.8, "tau": 150.0}
PASSIVE = {"m": 10.0, "D": 15.0}
M2 = [[-2.0, 0.0], [11.0, -2.5]]
M4 = [[-2.0, 0.0, 0.0, 0.0], [11.0, -2.5, 0.0, 0.0], [4.0, -1.0, -3.0, 0.0], [-6.0, 5.0, 1.0, -3.5]]


def relabel(n):
    return n + 52 if n <= 16 else n - 16


def wind(fast, kind):
    s = 10.0 if fast else 1.0
    if kind == "G":
        return {"rho_low": [0.1 * s], "rho_med": [], "psi": [10.0, 0.0], "chi0": [0.0, 3.0 * s]}
    return {"rho_low": [0.1 * s], "rho_med": [0.2 * s], "psi": [10.0, 0.0, 10.0, 0.0],
            "chi0": [0.0, 3.0 * s, 0.0, 8.0 * s]}


def build(case, name, fast=False, events=(), t_end=150.0):
    loads = {int(r[1]): float(r[2]) for r in case["loads"][1:]}
    active = sorted((b for b, p in loads.items() if p > 0), key=lambda b: (-loads[b], b))[:24]
    buses = []
    for n in range(1, 69):
        i = relabel(n)
        if n <= 16:
            kind, params = "G", GEN
        elif n in active:
            kind, params = "L", LOAD
        else:
            kind, params = "T", PASSIVE
        d = {"id": i, "kind": kind, "params": dict(params), "theta_star": 0.0}
        if kind != "T":
            d["wind"] = wind(fast, kind)
            d["internal_model"] = {"M": M2 if kind == "G" else M4, "N": [1.0] * (2 if kind == "G" else 4)}
        if kind == "L":
            d["inelastic_demand"] = {"constant": 100.0,
                                     "terms": [{"amplitude": 50.0, "frequency_rad": 0.01, "phase": 0.0}]}
        buses.append(d)
    buses.sort(key=lambda d: d["id"])
    edges = set()
    for r in case["lines"][1:] + case["transformers"][1:]:
        a, b = relabel(int(r[1])), relabel(int(r[2]))
        edges.add((min(a, b), max(a, b)))
    doc = {
        "name": name,
        "buses": buses,
        "edges": [[a, b, 1.5] for a, b in sorted(edges)],
        "setpoint_hz": 60.0,
        "events": [{"time_s": t, "bus": b["id"], "action": a}
                   for t, a in events for b in buses if b["kind"] != "T"],
        "integrator": {"dt": 1e-3, "t_end": t_end, "decimate": 100},
        "controller": {"solution": "robust", "design": "manual",
                       "gains": {"G_robust": [5, 10, 15, 35, 3], "L_robust": [5, 10, 15],
                                 "G_adaptive": [15, 20, 40, 3], "L_adaptive": [15, 20, 40]},
                       "gamma": 0.1, "passive_alpha": 0.99},
        "bess_time_constant": 1.0,
        "delta": 0.1,
        "initial": "rest",
    }
    doc["events"].sort(key=lambda e: (e["time_s"], e["bus"]))
    return doc


def main(path):
    spec = importlib.util.spec_from_file_location("case", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    case = mod.load()
    docs = {
        "ieee68.json": build(case, "ieee68"),
        "ieee68_fast.json": build(case, "ieee68_fast", fast=True),
        "ieee68_compare.json": build(case, "ieee68_compare",
                                     events=((10.0, "wind_connect"), (120.0, "wind_disconnect")), t_end=200.0),
    }
    for fname, doc in docs.items():
        (OUT / fname).write_text(json.dumps(doc, indent=1) + "\n")


if __name__ == "__main__":
    main(sys.argv[1])
