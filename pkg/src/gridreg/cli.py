"""Command line entry point ``gridreg``.

Exit codes: 0 success, 2 scenario or assumption validation failure,
3 integration failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .grid import ScenarioError, load_scenario, validate_assumptions
from .internal_model import ConfigurationError
from .network import ClosedLoop, assemble_A, designs_for, is_hurwitz, negdef_certificate
from .plant import IntegrationError
from . import sim, stability

EXIT_OK, EXIT_VALIDATION, EXIT_INTEGRATION = 0, 2, 3


def find_scenario(name: str) -> Path:
    """A path on disk, or the stem of a shipped scenario such as ``ieee68``."""
    p = Path(name)
    if p.exists():
        return p
    shipped = resources.files("gridreg") / "scenarios" / f"{p.stem}.json"
    if shipped.is_file():
        return Path(str(shipped))
    raise ScenarioError(f"scenario {name!r} not found")


def _load(args):
    sc = load_scenario(find_scenario(args.scenario))
    rep = validate_assumptions(sc)
    if not rep.all_passed:
        for line in rep.lines():
            print(line, file=sys.stderr)
        raise ScenarioError("scenario violates the standing assumptions")
    return sc


def _solution(args, sc) -> str:
    return args.solution or sc.controller.solution


def _run_kw(args) -> dict:
    return {"dt": args.dt, "t_end": args.t_end, "decimate": args.decimate}


def cmd_run(args) -> int:
    sc = _load(args)
    rec = sim.run(sc, _solution(args, sc), designs=_designs(args, sc), **_run_kw(args))
    if args.out:
        sim.export_csv(rec, args.out)
    dev = np.abs(rec.w[-1] - sc.setpoint_hz).max()
    print(f"{rec.solution}: {rec.t.size} samples to t={rec.t[-1]:g} s, "
          f"final max |w - w*| = {dev:.3e} Hz, final |xhat| = {rec.xhat_norm[-1]:.3e}")
    return EXIT_OK


def cmd_compare(args) -> int:
    sc = _load(args)
    c = sim.compare(sc, **_run_kw(args))
    if args.out:
        stem = Path(args.out)
        sim.export_csv(c.robust, stem.with_name(stem.stem + "_robust.csv"))
        sim.export_csv(c.baseline, stem.with_name(stem.stem + "_baseline.csv"))
    print(f"RMS |w - w*| on t in [{c.window[0]:g}, {c.window[1]:g}] s")
    print(f"  internal model: {c.rms_robust:.6e}")
    print(f"  baseline:       {c.rms_baseline:.6e}")
    print(f"  ratio:          {c.ratio:.6e}")
    return EXIT_OK


def _designs(args, sc):
    return designs_for(sc, _solution(args, sc), getattr(args, "design", None))


def cmd_check_gains(args) -> int:
    sc = _load(args)
    sol = _solution(args, sc)
    if sol == "baseline":
        raise ConfigurationError("gain checks apply to the robust and adaptive controllers")
    designs = _designs(args, sc)
    print(f"{'bus':>4} {'kind':>4}  gains{'':<40} sylvester")
    for bid in sorted(designs):
        d = designs[bid]
        res = f"{d.spec.residual:.2e}" if d.spec is not None else "-"
        ks = ", ".join(f"{v:.6g}" for v in d.gains.k)
        extra = ""
        if sol == "adaptive":
            rho = sc.topology.bus(bid).wind.rho_ceiling
            from .adaptive import bound_B

            B = bound_B(d.spec.M, d.spec.ell, rho) if d.spec is not None else float("nan")
            alpha = d.gains.alpha if d.gains.alpha is not None else float("nan")
            extra = f"  B(M)={B:.6g} alpha={alpha:.6g}"
        print(f"{bid:>4} {d.bus.kind:>4}  [{ks}]{'':<{max(1, 44 - len(ks))}}{res}{extra}")
    loop = ClosedLoop(sc, sol, designs, freeze_estimate=True)
    A, A_inv = assemble_A(loop, with_inverse=True)
    verdict = is_hurwitz(A, A_inv=A_inv)
    print(f"A dimension: {A.shape[0]}")
    print(f"max Re eig(A): {verdict.max_real:.6g}  {'PASS' if verdict.passed else 'FAIL'}")
    ok = verdict.passed
    if sol == "adaptive":
        cert = negdef_certificate(loop, A)
        print(f"gamma: {sc.controller.gamma:g}")
        print(f"max eig(A + A^T): {cert.literal.max_eig:.6g}  {'PASS' if cert.literal.passed else 'FAIL'}")
        print(f"max eig, passive-weighted and equilibrated: {cert.weighted.max_eig_scaled:.6g}")
        ok = ok and cert.literal.passed
    print("PASS" if ok else "FAIL")
    return EXIT_OK


def cmd_certify(args) -> int:
    sc = _load(args)
    sol = _solution(args, sc)
    loop = ClosedLoop(sc, sol, _designs(args, sc), freeze_estimate=True)
    A, A_inv = assemble_A(loop, with_inverse=True)
    graph = stability.gain_graph(loop, A)
    cert = stability.certify(graph)
    h = is_hurwitz(A, A_inv=A_inv)
    doc = {"scenario": sc.name, "solution": sol,
           "hurwitz": {"passed": h.passed, "max_real": h.max_real, "error": h.error},
           "small_gain": cert.to_dict()}
    text = json.dumps(doc, indent=2, default=float)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_validate(args) -> int:
    sc = load_scenario(find_scenario(args.scenario))
    rep = validate_assumptions(sc)
    for line in rep.lines():
        print(line)
    return EXIT_OK if rep.all_passed else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridreg", description="Distributed frequency regulation experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, sim_flags=True):
        p.add_argument("--scenario", required=True, help="scenario JSON path or shipped name (ieee68)")
        p.add_argument("--solution", choices=("robust", "adaptive", "baseline"))
        p.add_argument("--design", choices=("manual", "algorithm"), help="override the scenario's gain source")
        p.add_argument("--out", help="output file")
        if sim_flags:
            p.add_argument("--dt", type=float)
            p.add_argument("--t-end", type=float)
            p.add_argument("--decimate", type=int)

    for name, fn, flags, doc in (("run", cmd_run, True, "simulate and optionally write CSV"),
                                 ("compare", cmd_compare, True, "internal model against baseline"),
                                 ("check-gains", cmd_check_gains, False, "print gains and the spectral check"),
                                 ("certify", cmd_certify, False, "small-gain certificate as JSON"),
                                 ("validate", cmd_validate, False, "check the standing assumptions")):
        p = sub.add_parser(name, help=doc)
        common(p, flags)
        p.set_defaults(fn=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ScenarioError, ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except IntegrationError as exc:
        print(f"integration failure at t={exc.time} s, bus {exc.bus}: {exc}", file=sys.stderr)
        return EXIT_INTEGRATION


if __name__ == "__main__":
    sys.exit(main())
