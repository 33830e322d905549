"""Wind connected at 10 s and dropped at 120 s: internal model against baseline."""
import numpy as np

from gridreg import sim
from gridreg.cli import find_scenario
from gridreg.grid import load_scenario

sc = load_scenario(find_scenario("ieee68_compare"))
c = sim.compare(sc)
print(f"RMS |w - w*| on {c.window}: internal model {c.rms_robust:.3e}, baseline {c.rms_baseline:.3e}")
for name, rec in (("internal model", c.robust), ("baseline", c.baseline)):
    dev = np.max(np.abs(rec.w - sc.setpoint_hz), axis=1)
    late = np.flatnonzero((rec.t > 120) & (dev >= 1e-3))
    settle = rec.t[late[-1]] if late.size else 120.0
    print(f"{name:>15}: peak deviation {dev.max():.3e} Hz, within 1e-3 Hz after t={settle:.1f} s")
sim.export_csv(c.robust, "compare_robust.csv")
sim.export_csv(c.baseline, "compare_baseline.csv")
