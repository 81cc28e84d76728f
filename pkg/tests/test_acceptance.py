"""Acceptance criteria 1-8.

Each test prints one ``criterion k: PASS|FAIL`` line with its measured
numbers and runtime, and the lines are repeated in the pytest terminal
summary. Run this file directly for the lines alone::

    python3 tests/test_acceptance.py
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import linprog

sys.path.insert(0, str(Path(__file__).parent))

from bassdecomp import motlp  # noqa: E402
from bassdecomp.bassim import (simulate, uniform_grid, verify_marginals,  # noqa: E402
                               verify_martingale, verify_value)
from bassdecomp.cli import slope_jumps  # noqa: E402
from bassdecomp.convexfn import PwaPotential, conjugate_maxaffine, lower_convex_envelope  # noqa: E402
from bassdecomp.dualsolve import eval_dual, solve_dual  # noqa: E402
from bassdecomp.examples import circles, ex61, psi_plus, radius_for, random_split_pair  # noqa: E402
from bassdecomp.gaussmcov import mcov_1d  # noqa: E402
from bassdecomp.measures import DiscreteMeasure, quantile_discretize  # noqa: E402
from bassdecomp.paving import (compare_partitions, decompose, pave_dual_divergence,  # noqa: E402
                               pave_lp, pave_potential_1d)
from strategies import strict_split_pair  # noqa: E402

RESULTS = {}


def _report(k, title, passed, detail, seconds, budget):
    ok = bool(passed and seconds <= budget)
    line = (f"criterion {k}: {'PASS' if ok else 'FAIL'}  {title}  "
            f"[{detail}; {seconds:.1f}s / {budget:.0f}s]")
    RESULTS[k] = line
    print(line, flush=True)
    return ok, line


class _Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


@pytest.fixture(scope="module")
def ex61_paving():
    mu, nu, _, _ = ex61(200)
    with _Clock() as clock:
        res = decompose(mu, nu)
    return res, clock.seconds


def test_criterion_1_duality_gap():
    rng = np.random.default_rng(1001)
    worst, converged = 0.0, 0
    with _Clock() as clock:
        for _ in range(50):
            mu, nu = strict_split_pair(rng, n_mu=4, max_nu=10)
            trace, st = solve_dual(mu, nu)
            converged += trace.converged
            worst = max(worst, abs(st.dual_value - st.primal_value) / max(1.0, abs(st.dual_value)))
    ok, line = _report(1, "duality gap on 50 random 1D instances", worst <= 1e-4 and converged == 50,
                       f"max relative gap {worst:.2e} (tol 1e-4), converged {converged}/50",
                       clock.seconds, 60)
    assert ok, line


def test_criterion_2_closed_forms():
    with _Clock() as clock:
        two = mcov_1d(DiscreteMeasure([-1.0, 1.0], [0.5, 0.5])).value
        err = abs(two - np.sqrt(2 / np.pi))
        nu = quantile_discretize("gaussian", 200)
        D = eval_dual(PwaPotential(nu.atoms, 0.5 * nu.atoms[:, 0] ** 2),
                      DiscreteMeasure.dirac([0.0]), nu).dual_value
    ok, line = _report(2, "closed forms", err <= 1e-10 and 0.98 <= D <= 1.02,
                       f"|MCov - sqrt(2/pi)| {err:.1e} (tol 1e-10), quadratic D {D:.6f} in [0.98, 1.02]",
                       clock.seconds, 5)
    assert ok, line


def test_criterion_3_example_ex61(ex61_paving):
    res, seconds = ex61_paving
    comps = res.components
    kappas = sorted(c.kappa_weight for c in comps)
    value_err = max(abs(c.primal_value - 1.0) for c in comps)
    shape_err = 0.0
    for c in comps:
        y = c.bass.atoms[:, 0]
        sign = 1.0 if y.mean() > 0 else -1.0
        _, fit = slope_jumps(y, c.bass.v_potential.values)
        _, ref = slope_jumps(y, psi_plus(sign * y))
        shape_err = max(shape_err, float(np.abs(fit - ref).max()))
    passed = (len(comps) == 2 and np.allclose(kappas, [0.5, 0.5], atol=1e-9)
              and value_err <= 2e-2 and shape_err <= 5e-2)
    ok, line = _report(3, "lognormal pair (ex61) decomposition", passed,
                       f"{len(comps)} components, kappa {kappas}, max |P-1| {value_err:.4f} (tol 2e-2), "
                       f"psi slope-jump error {shape_err:.4f} (tol 5e-2)", seconds, 120)
    assert ok, line


def test_criterion_4_paving_cross_validation():
    rng = np.random.default_rng(20261016)
    lp_pot = lp_dd = 0
    failures = []
    with _Clock() as clock:
        for k in range(100):
            mu, nu = random_split_pair(rng, n_mu=4, max_nu=12, grid=0.25, keep_prob=0.15)
            lp = pave_lp(mu, nu)
            a = compare_partitions(lp, pave_potential_1d(mu, nu))["agree"]
            trace, _ = solve_dual(mu, nu)
            b = compare_partitions(lp, pave_dual_divergence(trace, mu, nu))["agree"]
            lp_pot += a
            lp_dd += b
            if not b:
                failures.append(k)
    detail = f"lp/potential {lp_pot}/100, lp/dual-divergence {lp_dd}/100"
    if failures:
        detail += f", threshold failures at instances {failures}"
    ok, line = _report(4, "paving cross-validation", lp_pot == 100 and lp_dd == 100, detail,
                       clock.seconds, 600)
    assert ok, line


def test_criterion_5_circles_threshold():
    with _Clock() as clock:
        feasible = bool(motlp.feasible(*circles(24, 1.5)))
        infeasible = not motlp.feasible(*circles(24, 1.4))
        mu, nu = circles(24, 1.5)
        res = decompose(mu, nu)
        radial = 0
        for c in res.components:
            if len(c.mu_indices) != 1 or c.cell.kind != "segment":
                continue
            x = mu.atoms[c.mu_indices[0]]
            ends = sorted(c.cell.vertices.tolist(), key=np.linalg.norm)
            radial += bool(np.allclose(ends, [x / 2, 3 * x / 2], atol=1e-9))
    passed = feasible and infeasible and len(res.components) == 24 and radial == 24
    ok, line = _report(5, "circles at R = 3/2", passed,
                       f"feasible(1.5) {feasible}, infeasible(1.4) {infeasible}, "
                       f"{len(res.components)} components, {radial} cells equal (x/2, 3x/2)",
                       clock.seconds, 300)
    assert ok, line


def test_criterion_6_circles_radius():
    with _Clock() as clock:
        R = [radius_for(rho, samples=100_000) for rho in (1, 2, 4)]
        mu, nu = circles(24, R[-1])
        res = decompose(mu, nu)
    decreasing = R[0] > R[1] > R[2]
    passed = decreasing and 1.5 <= R[2] <= 1.6 and len(res.components) == 1
    ok, line = _report(6, "circles R(rho)", passed,
                       f"R(1,2,4) = {R[0]:.4f}, {R[1]:.4f}, {R[2]:.4f} (strictly decreasing "
                       f"{decreasing}, R(4) in [1.50, 1.60]), {len(res.components)} component at R(4)",
                       clock.seconds, 900)
    assert ok, line


def test_criterion_7_simulation(ex61_paving):
    res, _ = ex61_paving
    parts = []
    passed = True
    with _Clock() as clock:
        for k, c in enumerate(res.components):
            pb = simulate(c.bass, 100_000, uniform_grid(64), seed=k)
            marg = verify_marginals(pb, c.bass, c.mu_local, c.nu_local)
            mart = verify_martingale(pb)
            val = verify_value(pb, c.primal_value)
            passed &= marg["passed"] and mart["passed"] and val["passed"]
            parts.append(f"comp {k}: chi2 p {marg['p_value']:.3f}, z_max {mart['z_max']:.2f}/"
                         f"{mart['z_critical']:.2f}, trace {val['mean']:.4f} vs P {c.primal_value:.4f} "
                         f"(tol {val['tol']:.4f})")
    ok, line = _report(7, "ex61 Bass simulation, 1e5 paths", passed, "; ".join(parts),
                       clock.seconds, 300)
    assert ok, line


def _random_convex(nu, rng):
    y = nu.atoms
    vals = 0.5 * (y ** 2).sum(1) * rng.uniform(0.3, 2.0) + 0.05 * rng.normal(size=len(y))
    return lower_convex_envelope(PwaPotential(y, vals))


def test_criterion_8_invariance_suite():
    rng = np.random.default_rng(808)
    shift = fm = fd = resid = 0.0
    support_ok = 0
    with _Clock() as clock:
        for _ in range(20):
            mu, nu = strict_split_pair(rng)
            psi = _random_convex(nu, rng)
            d0 = eval_dual(psi, mu, nu)
            a, b = rng.normal(size=2) * 3
            d1 = eval_dual(PwaPotential(nu.atoms, psi.values + a + b * nu.atoms[:, 0]), mu, nu)
            shift = max(shift, abs(d1.dual_value - d0.dual_value) / max(1.0, abs(d0.dual_value)))
            # Fenchel-Moreau on the vertices of the envelope
            info = psi.envelope_info()
            slopes = np.concatenate([[info.slopes[0] - 1], info.slopes, [info.slopes[-1] + 1]])
            v, _ = conjugate_maxaffine(psi, slopes)
            back = np.max(np.outer(nu.atoms[:, 0], slopes) - v[None], axis=1)
            fm = max(fm, float(np.abs(back - psi.values).max()))
            # central differences along atoms that stay envelope vertices
            h = 1e-6
            for j in range(len(nu)):
                up, dn = psi.values.copy(), psi.values.copy()
                up[j] += h
                dn[j] -= h
                envs = [lower_convex_envelope(PwaPotential(nu.atoms, w)).values for w in (up, dn)]
                if max(np.abs(envs[0] - up).max(), np.abs(envs[1] - dn).max()) > 1e-13:
                    continue
                num = (eval_dual(PwaPotential(nu.atoms, up), mu, nu).dual_value
                       - eval_dual(PwaPotential(nu.atoms, dn), mu, nu).dual_value) / (2 * h)
                fd = max(fd, abs(num - d0.gradient[j]))
            _, st = solve_dual(mu, nu)
            resid = max(resid, max(st.induced.marginal_residuals(mu, nu)),
                        st.induced.barycenter_defect(mu, nu))
            # any martingale coupling lives on the closed cells of the paving
            paving = pave_lp(mu, nu)
            mt = motlp.MtPolytope(mu, nu)
            sol = linprog(rng.normal(size=mt.A.shape[1]), A_eq=mt.A, b_eq=mt.b, bounds=(0, None),
                          method="highs")
            mass = sol.x.reshape(len(mu), len(nu))
            support_ok += all(
                paving.components[paving.component_of(i)].cell.closure_contains(nu.atoms[j])
                for i, j in zip(*np.nonzero(mass > 1e-9)))
    passed = shift <= 1e-9 and fm <= 1e-9 and fd <= 1e-6 and resid <= 1e-6 and support_ok == 20
    ok, line = _report(8, "invariance suite", passed,
                       f"shift {shift:.1e} (1e-9), Fenchel-Moreau {fm:.1e} (1e-9), "
                       f"gradient vs FD {fd:.1e} (1e-6), coupling residual {resid:.1e} (1e-6), "
                       f"support inclusion {support_ok}/20", clock.seconds, 120)
    assert ok, line


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
