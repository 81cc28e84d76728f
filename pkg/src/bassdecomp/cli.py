"""Command line front end.

Every command prints a deterministic JSON report on stdout and a short
human summary on stderr. Artifacts (couplings, traces, pavings, paths,
plot data) go to ``--out`` when it is given.

Exit codes: 0 success, 2 invalid input, 3 pair not in convex order,
4 non-convergence, 5 verification failure (including disagreeing paving
routes).

Seeds. ``--seed`` is the only source of randomness. The planar smoother
uses it directly as the frame seed, component ``k`` of a simulation uses
the first 64-bit word of ``SeedSequence([seed, k])``, and the R(rho)
bisection of the circles example uses ``seed`` for its normal sample.
"""

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import _jsonio
from .bassim import (simulate, uniform_grid, verify_marginals, verify_martingale,
                     verify_value)
from .convexfn import MCConfig
from .dualsolve import SolveConfig, solve_dual
from .errors import (BassDecompError, BoundaryAtom, CrossLeak, InfeasibleError, MeasureError,
                     NonConvergence, PavingDisagreement, VerificationFailure)
from .examples import circles, ex61, kink, psi_plus, radius_for
from .gaussmcov import mcov
from .measures import check_convex_order, load_measure
from .paving import (DecomposeConfig, PavingResult, compare_partitions, decompose,
                     pave_dual_divergence, pave_lp, pave_potential_1d)

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_NONCONV, EXIT_VERIFY = 0, 2, 3, 4, 5


class _Failed(Exception):
    """A command ran but one of its checks failed; carries the report."""

    def __init__(self, report, code=EXIT_VERIFY):
        super().__init__("verification failed")
        self.report = report
        self.code = code


# ---------------------------------------------------------------- helpers

def _mc(args):
    return MCConfig(samples=args.samples, seed=args.seed)


def _solve_cfg(args):
    return SolveConfig(tol=args.tol, mc=_mc(args))


def _component_seed(seed, k):
    return int(np.random.SeedSequence([seed, k]).generate_state(1, np.uint64)[0])


def _out_path(args, name):
    if not args.out:
        return None
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _emit_records(args, stem, records):
    """Write a list of flat dicts as ``stem.jsonl`` or ``stem.csv``."""
    if not args.out or not records:
        return None
    if args.format == "csv":
        path = _out_path(args, stem + ".csv")
        keys = list(records[0])
        _write_table(path, keys, ([r[k] for k in keys] for r in records))
    else:
        path = _out_path(args, stem + ".jsonl")
        with open(path, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(_jsonio.dumps(r) + "\n")
    return path


def _say(msg):
    print(msg, file=sys.stderr)


def _partition_json(p):
    return sorted(sorted(int(i) for i in block) for block in p.partition())


def _component_summary(c):
    return {"mu_indices": [int(i) for i in c.mu_indices],
            "nu_indices": [int(j) for j in c.nu_indices],
            "kappa": float(c.kappa_weight), "cell": c.cell.to_json(),
            "primal_value": c.primal_value, "dual_value": c.dual_value, "gap": c.gap,
            "irreducible": c.irreducible}


def _verify_component(comp, k, args, mc):
    model = comp.bass
    pb = simulate(model, args.paths, uniform_grid(args.steps), _component_seed(args.seed, k), mc)
    rep = {"component": k,
           "marginals": verify_marginals(pb, model, comp.mu_local, comp.nu_local, mc,
                                         start_tol=args.start_tol),
           "martingale": verify_martingale(pb),
           "value": verify_value(pb, comp.primal_value)}
    rep["martingale"].pop("table")
    rep["passed"] = all(rep[key]["passed"] for key in ("marginals", "martingale", "value"))
    return rep, pb


# ---------------------------------------------------------------- commands

def cmd_mcov(args):
    p = load_measure(args.measure)
    res = mcov(p, _mc(args))
    report = {"dim": p.dim, "atoms": len(p), "value": res.value, "error": res.error_estimate,
              "method": "exact" if res.error_estimate == 0 else "semidiscrete"}
    _say(f"MCov = {res.value:.10f} +/- {res.error_estimate:.2e}")
    return report


def cmd_check_order(args):
    mu, nu = load_measure(args.mu), load_measure(args.nu)
    ok, payload = check_convex_order(mu, nu)
    if not ok:
        report = {"convex_order": False, "witness": payload}
        _say("not in convex order")
        raise _Failed(report, EXIT_INFEASIBLE)
    report = {"convex_order": True,
              "marginal_residual": float(max(payload.marginal_residuals(mu, nu))),
              "barycenter_defect": float(payload.barycenter_defect(mu, nu))}
    path = _out_path(args, "coupling.json")
    if path:
        _jsonio.dump(payload.to_json(), path)
    _say("convex order holds; a martingale coupling was found")
    return report


def cmd_solve_dual(args):
    mu, nu = load_measure(args.mu), load_measure(args.nu)
    trace, st = solve_dual(mu, nu, _solve_cfg(args))
    S = trace.fast_convergence_certificate
    report = {"status": trace.status, "converged": trace.converged,
              "iterations": trace.iterations, "dual_value": st.dual_value,
              "primal_value": st.primal_value, "gap": st.gap, "stderr": st.stderr,
              "grad_norm": trace.grad_norm[-1] if trace.grad_norm else 0.0,
              "S_partial_sum": float(S[-1]) if len(S) else 0.0,
              "psi": st.psi.values.tolist(), "bass_points": st.bass_points.tolist()}
    _emit_records(args, "trace", list(trace.records()))
    _say(f"{trace.status} after {trace.iterations} iterations: D = {st.dual_value:.10g}, "
         f"gap = {st.gap:.2e}")
    if not trace.converged:
        raise _Failed(report, EXIT_NONCONV)
    return report


def cmd_pave(args):
    mu, nu = load_measure(args.mu), load_measure(args.nu)
    routes = {"lp": lambda: pave_lp(mu, nu)}
    if mu.dim == 1:
        routes["potential-1d"] = lambda: pave_potential_1d(mu, nu)

    def divergence():
        trace, _ = solve_dual(mu, nu, _solve_cfg(args))
        return pave_dual_divergence(trace, mu, nu)

    routes["dual-divergence"] = divergence
    if args.method != "all":
        if args.method not in routes:
            raise MeasureError(f"method {args.method!r} is not available in dimension {mu.dim}")
        routes = {args.method: routes[args.method]}
    results = {name: fn() for name, fn in routes.items()}
    names = list(results)
    agreement = {f"{a}_vs_{b}": compare_partitions(results[a], results[b])
                 for a, b in zip(names[:1] * (len(names) - 1), names[1:])}
    report = {"partitions": {n: _partition_json(r) for n, r in results.items()},
              "agreement": agreement,
              "cells": {n: [c.cell.to_json() for c in r.components] for n, r in results.items()}}
    for n, r in results.items():
        path = _out_path(args, f"paving_{n}.json")
        if path:
            _jsonio.dump(r.to_json(), path)
    _say(", ".join(f"{n}: {len(r.components)} components" for n, r in results.items()))
    if not all(a["agree"] for a in agreement.values()):
        raise _Failed(report)
    return report


def _decompose_report(res):
    st = res.stats["state"]
    return {"components": [_component_summary(c) for c in res.components],
            "agreement": res.agreement_report, "dual_value": st.dual_value,
            "primal_value": st.primal_value, "gap": st.gap,
            "iterations": res.stats["trace"].iterations, "leak": res.stats["leak"]}


def _decompose_summary(res):
    lines = [f"{len(res.components)} component(s)"]
    for k, c in enumerate(res.components):
        lines.append(f"  [{k}] kappa={c.kappa_weight:.6f} mu={len(c.mu_indices)} "
                     f"nu={len(c.nu_indices)} P={c.primal_value:.6f} gap={c.gap:.2e}")
    return "\n".join(lines)


def cmd_decompose(args):
    mu, nu = load_measure(args.mu), load_measure(args.nu)
    res = decompose(mu, nu, DecomposeConfig(solve=_solve_cfg(args)))
    path = _out_path(args, "paving.json")
    if path:
        _jsonio.dump(res.to_json(), path)
    _emit_records(args, "trace", list(res.stats["trace"].records()))
    _say(_decompose_summary(res))
    return _decompose_report(res)


def cmd_simulate(args):
    try:
        res = PavingResult.from_json(_jsonio.load(args.paving))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise MeasureError(f"{args.paving}: cannot read paving ({exc})") from None
    missing = [k for k, c in enumerate(res.components) if c.bass is None]
    if missing:
        raise MeasureError(f"components without Bass models: {missing}")
    mc = _mc(args)
    reports = []
    for k, comp in enumerate(res.components):
        rep, pb = _verify_component(comp, k, args, mc)
        reports.append(rep)
        path = _out_path(args, f"paths_{k}.csv")
        if path:
            pb.to_csv(path, max_paths=args.export_paths)
        _say(f"component {k}: {'pass' if rep['passed'] else 'FAIL'} "
             f"(chi2 p={rep['marginals']['p_value']:.3g}, z_max={rep['martingale']['z_max']:.2f}, "
             f"trace={rep['value']['mean']:.4f} vs P={rep['value']['expected']:.4f})")
    report = {"paths": args.paths, "steps": args.steps, "components": reports,
              "passed": all(r["passed"] for r in reports)}
    if not report["passed"]:
        raise _Failed(report)
    return report


# ---------------------------------------------------------------- examples

def slope_jumps(y, psi):
    """Differences of consecutive chord slopes of psi on sorted atoms.

    Adding an affine function to psi leaves these unchanged.
    """
    o = np.argsort(y)
    y, psi = y[o], psi[o]
    return y[1:-1], np.diff(np.diff(psi) / np.diff(y))


def _example_ex61(args):
    mu, nu, _, _ = ex61(args.n)
    res = decompose(mu, nu, DecomposeConfig(solve=_solve_cfg(args)))
    report = _decompose_report(res)
    shape_err = 0.0
    rows = []
    for c in res.components:
        y = c.bass.atoms[:, 0]
        sign = 1.0 if y.mean() > 0 else -1.0
        yy, fit = slope_jumps(y, c.bass.v_potential.values)
        _, ref = slope_jumps(y, psi_plus(sign * y))
        shape_err = max(shape_err, float(np.abs(fit - ref).max()))
        rows.extend(zip(yy, fit, ref))
    gaps = [abs(c.primal_value - 1.0) for c in res.components]
    kappas = sorted(c.kappa_weight for c in res.components)
    checks = {"two_components": len(res.components) == 2,
              "kappa_half": len(kappas) == 2 and max(abs(k - 0.5) for k in kappas) <= 1e-9,
              "value_near_one": max(gaps) <= 2e-2,
              "psi_shape": shape_err <= 5e-2}
    report.update({"n": args.n, "psi_shape_error": shape_err, "value_error": max(gaps),
                   "checks": checks, "passed": all(checks.values())})
    if args.out:
        _jsonio.dump(res.to_json(), _out_path(args, "paving.json"))
        _emit_records(args, "convergence", list(res.stats["trace"].records()))
        _write_table(_out_path(args, "psi_slope_jumps.csv"), ["y", "fitted", "analytic"], sorted(rows))
        _write_table(_out_path(args, "cells.csv"), ["component", "lo", "hi", "kappa"],
                     [(k, float(c.cell.vertices.min()), float(c.cell.vertices.max()), c.kappa_weight)
                      for k, c in enumerate(res.components)])
    _say(_decompose_summary(res))
    _say(f"psi slope-jump error {shape_err:.3e}, max |P - 1| {max(gaps):.3e}")
    return report


def _radial_cells(res, mu):
    """Max distance of each component cell from the segment (x/2, 3x/2)."""
    err = 0.0
    for c in res.components:
        if len(c.mu_indices) != 1 or c.cell.kind != "segment":
            return np.inf
        x = mu.atoms[c.mu_indices[0]]
        target = np.array([0.5 * x, 1.5 * x])
        v = c.cell.vertices
        d = min(np.abs(v - target).max(), np.abs(v[::-1] - target).max())
        err = max(err, float(d))
    return err


def _example_circles(args):
    t0 = time.perf_counter()
    rhos = [float(r) for r in args.rho.split(",")]
    radii = [radius_for(r, samples=args.radius_samples, seed=args.seed) for r in rhos]
    kinks = [kink(r) for r in rhos]
    decreasing = all(a > b for a, b in zip(radii, radii[1:]))
    _say("rho, k(rho), R(rho): " + "; ".join(f"{r:g}, {k:.4f}, {R:.4f}" for r, k, R in zip(rhos, kinks, radii)))
    n = args.n
    mu15, nu15 = circles(n, 1.5)
    mu14, nu14 = circles(n, 1.4)
    feas15 = check_convex_order(mu15, nu15)[0]
    feas14 = check_convex_order(mu14, nu14)[0]
    cfg = DecomposeConfig(solve=_solve_cfg(args))
    res15 = decompose(mu15, nu15, cfg)
    radial = _radial_cells(res15, mu15)
    _say(f"R = 1.5: {len(res15.components)} components, cell error {radial:.2e}")
    R_irr = args.R if args.R is not None else radii[-1]
    mu_r, nu_r = circles(n, R_irr)
    res_r = decompose(mu_r, nu_r, cfg)
    _say(f"R = {R_irr:.4f}: {len(res_r.components)} component(s)")
    mc = _mc(args)
    sims = []
    targets = [("R=1.5", res15, [0])] + ([("R=irreducible", res_r, [0])] if args.simulate_irreducible else [])
    for tag, res, picks in targets:
        for k in picks:
            rep, _ = _verify_component(res.components[k], k, args, mc)
            rep["case"] = tag
            sims.append(rep)
            _say(f"simulation {tag} component {k}: {'pass' if rep['passed'] else 'FAIL'}")
    checks = {"R_decreasing": decreasing,
              "R_last_in_range": 1.50 <= radii[-1] <= 1.60,
              "feasible_at_1.5": bool(feas15), "infeasible_at_1.4": not feas14,
              "radial_components": len(res15.components) == n and radial <= 1e-6,
              "single_component": len(res_r.components) == 1,
              "simulation": all(s["passed"] for s in sims)}
    report = {"n": n, "rho": rhos, "k": kinks, "R": radii, "R_irreducible": R_irr,
              "paving_1.5": _decompose_report(res15), "paving_irreducible": _decompose_report(res_r),
              "radial_cell_error": radial, "simulations": sims,
              "checks": checks, "passed": all(checks.values())}
    if args.out:
        _write_table(_out_path(args, "radius.csv"), ["rho", "k", "R"], zip(rhos, kinks, radii))
        _jsonio.dump(res15.to_json(), _out_path(args, "paving_R1.5.json"))
        _jsonio.dump(res_r.to_json(), _out_path(args, "paving_irreducible.json"))
        _emit_records(args, "convergence_R1.5", list(res15.stats["trace"].records()))
        _emit_records(args, "convergence_irreducible", list(res_r.stats["trace"].records()))
    _say(f"circles example finished in {time.perf_counter() - t0:.1f} s")
    return report


def cmd_example(args):
    report = _example_ex61(args) if args.name == "ex61" else _example_circles(args)
    if not report["passed"]:
        raise _Failed(report)
    return report


# ---------------------------------------------------------------- parser

def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(kind):
    def parse(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError("must be positive")
        return v
    return parse


def _global_flags(p, defaults):
    def d(value):
        return value if defaults else argparse.SUPPRESS

    p.add_argument("--seed", type=_u64, default=d(0), help="master seed (unsigned 64-bit)")
    p.add_argument("--tol", type=_positive(float), default=d(1e-9), help="dual gradient tolerance")
    p.add_argument("--samples", type=_positive(int), default=d(512),
                   help="Monte Carlo samples of the planar smoother")
    p.add_argument("--out", default=d(None), help="artifact directory")
    p.add_argument("--format", choices=("json", "csv"), default=d("json"),
                   help="format of tabular artifacts")


def _sim_flags(p):
    p.add_argument("--paths", type=_positive(int), default=100_000)
    p.add_argument("--steps", type=_positive(int), default=64)
    p.add_argument("--start-tol", type=_positive(float), default=1e-6,
                   help="allowed distance between M_0 and the source atom")
    p.add_argument("--export-paths", type=_positive(int), default=200,
                   help="paths written per component CSV")


def build_parser():
    parser = argparse.ArgumentParser(prog="bassdecomp", description=__doc__.split("\n")[0])
    _global_flags(parser, True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mcov", parents=[common], help="maximal covariance with the Gaussian")
    p.add_argument("measure")
    p.set_defaults(func=cmd_mcov)

    p = sub.add_parser("check-order", parents=[common], help="convex order test")
    p.add_argument("mu")
    p.add_argument("nu")
    p.set_defaults(func=cmd_check_order)

    p = sub.add_parser("solve-dual", parents=[common], help="minimize the dual functional")
    p.add_argument("mu")
    p.add_argument("nu")
    p.set_defaults(func=cmd_solve_dual)

    p = sub.add_parser("pave", parents=[common], help="paving routes and their agreement")
    p.add_argument("mu")
    p.add_argument("nu")
    p.add_argument("--method", default="all", choices=("all", "lp", "potential-1d", "dual-divergence"))
    p.set_defaults(func=cmd_pave)

    p = sub.add_parser("decompose", parents=[common], help="paving plus Bass fits")
    p.add_argument("mu")
    p.add_argument("nu")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("simulate", parents=[common], help="simulate and verify fitted Bass models")
    p.add_argument("paving")
    _sim_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("example", parents=[common], help="worked examples")
    p.add_argument("name", choices=("ex61", "circles"))
    p.add_argument("--n", type=_positive(int), default=None,
                   help="atoms per component law (ex61: 200, circles: 24)")
    p.add_argument("--rho", default="1,2,4", help="comma separated rho grid (circles)")
    p.add_argument("--radius-samples", type=_positive(int), default=100_000,
                   help="normal samples in the R(rho) bisection")
    p.add_argument("--R", type=_positive(float), default=None,
                   help="outer radius of the irreducible circles case (default R of the last rho)")
    p.add_argument("--simulate-irreducible", action="store_true",
                   help="also simulate the planar irreducible component")
    _sim_flags(p)
    p.set_defaults(func=cmd_example)
    return parser


def _error_code(exc):
    if isinstance(exc, InfeasibleError):
        return EXIT_INFEASIBLE
    if isinstance(exc, NonConvergence):
        return EXIT_NONCONV
    if isinstance(exc, (VerificationFailure, PavingDisagreement, CrossLeak)):
        return EXIT_VERIFY
    if isinstance(exc, (MeasureError, BoundaryAtom)):
        return EXIT_INPUT
    return EXIT_VERIFY


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "example" and args.n is None:
        args.n = 200 if args.name == "ex61" else 24
    try:
        report = args.func(args)
        code = EXIT_OK
    except _Failed as exc:
        report, code = exc.report, exc.code
    except BassDecompError as exc:
        code = _error_code(exc)
        report = {"error": type(exc).__name__, "message": str(exc)}
        for attr in ("witness", "diagnostics"):
            if getattr(exc, attr, None):
                report[attr] = getattr(exc, attr)
        _say(f"error: {exc}")
    except (OSError, ValueError) as exc:
        code = EXIT_INPUT
        report = {"error": type(exc).__name__, "message": str(exc)}
        _say(f"error: {exc}")
    report = {"command": args.command, "exit_code": code, **report}
    try:
        text = _jsonio.dumps(report)
    except (TypeError, ValueError):
        text = _jsonio.dumps(_sanitize(report))
    sys.stdout.write(text + "\n")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return code


def _sanitize(obj):
    """Replace non-finite floats and unknown objects so a report always prints."""
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    if obj is None or isinstance(obj, (bool, np.bool_, int, np.integer, str)):
        return obj
    return repr(obj)


if __name__ == "__main__":
    sys.exit(main())
