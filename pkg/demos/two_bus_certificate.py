"""Small-gain certificate and ISS bound check on a two-bus network."""
import numpy as np

from gridreg import stability
from gridreg.grid import scenario_from_dict
from gridreg.network import ClosedLoop, assemble_A, hat_trajectory, is_hurwitz

GEN = {"m": 10.0, "D": 1.0, "T_CH": 0.3, "T_G": 0.2, "R": 0.05, "b_prime": 40.0, "c_prime": -0.8, "tau": 150.0}
doc = {
    "name": "two-bus",
    "buses": [{"id": 1, "kind": "G", "params": GEN,
               "wind": {"rho_low": [0.1], "psi": [10.0, 0.0], "chi0": [0.0, 3.0]}},
              {"id": 2, "kind": "T", "params": {"m": 10.0, "D": 15.0}}],
    "edges": [[1, 2, 1.5]],
    "controller": {"design": "algorithm"},
}
sc = scenario_from_dict(doc)
loop = ClosedLoop(sc, "robust")
A, A_inv = assemble_A(loop, with_inverse=True)
print("gains:", loop.designs[1].gains.k)
print("Hurwitz:", is_hurwitz(A, A_inv=A_inv))

graph = stability.gain_graph(loop, A)
x0 = np.random.default_rng(0).normal(size=A.shape[0])
t, X = hat_trajectory(loop, x0, 0.01, 60.0)
norms = np.linalg.norm(X, axis=1)
cert = stability.certify(graph, L=2.0, trajectories=[(t, norms)])
print("largest gains:", cert.worst_edges(graph, 3))
print("contraction:", cert.contraction, " ISS bound margin:", cert.residuals[0].min_margin)
