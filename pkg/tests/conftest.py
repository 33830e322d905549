import numpy as np
import pytest

from gridreg.cli import find_scenario
from gridreg.grid import load_scenario, scenario_from_dict

GEN = {"m": 10.0, "D": 1.0, "T_CH": 0.3, "T_G": 0.2, "R": 0.05,
       "b_prime": 40.0, "c_prime": -0.8, "tau": 150.0}
LOAD = {"m": 10.0, "D": 1.0, "b_prime": 40.0, "c_prime": -0.8, "tau": 150.0}
WIND1 = {"rho_low": [0.1], "psi": [10.0, 0.0], "chi0": [0.0, 3.0]}


def two_bus_doc(design="algorithm", wind=True):
    g = {"id": 1, "kind": "G", "params": dict(GEN)}
    if wind:
        g["wind"] = dict(WIND1)
    return {"name": "two-bus",
            "buses": [g, {"id": 2, "kind": "T", "params": {"m": 10.0, "D": 15.0}}],
            "edges": [[1, 2, 1.5]],
            "controller": {"design": design, "gains": {"G": [5, 10, 15, 35, 3], "L": [5, 10, 15]}}}


def three_bus_doc(wind=True, **extra):
    g = {"id": 1, "kind": "G", "params": dict(GEN)}
    l = {"id": 2, "kind": "L", "params": dict(LOAD),
         "inelastic_demand": {"constant": 100.0, "terms": []}}
    if wind:
        g["wind"] = dict(WIND1)
        l["wind"] = {"rho_low": [0.1], "rho_med": [0.2], "psi": [10.0, 0.0, 10.0, 0.0],
                     "chi0": [0.0, 3.0, 0.0, 8.0]}
    doc = {"name": "three-bus",
           "buses": [g, l, {"id": 3, "kind": "T", "params": {"m": 10.0, "D": 15.0}}],
           "edges": [[1, 2, 1.5], [2, 3, 1.5], [1, 3, 1.5]],
           "controller": {"design": "manual",
                          "gains": {"G_robust": [5, 10, 15, 35, 3], "L_robust": [5, 10, 15],
                                    "G_adaptive": [15, 20, 40, 3], "L_adaptive": [15, 20, 40]}}}
    doc.update(extra)
    return doc


@pytest.fixture
def two_bus():
    return scenario_from_dict(two_bus_doc())


@pytest.fixture
def three_bus():
    return scenario_from_dict(three_bus_doc())


@pytest.fixture(scope="session")
def ieee68():
    return load_scenario(find_scenario("ieee68"))


@pytest.fixture(scope="session")
def ieee68_compare():
    return load_scenario(find_scenario("ieee68_compare"))


@pytest.fixture(scope="session")
def robust68_run(ieee68):
    """The 150 s robust run and its wall time, shared by several tests."""
    import time

    from gridreg import sim

    t0 = time.perf_counter()
    rec = sim.run(ieee68, "robust", dt=1e-3, t_end=150.0)
    return rec, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
