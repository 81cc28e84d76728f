"""Simulating a fitted Bass martingale and checking it.

The fitted model on each component is a convex potential plus the Bass
measure alpha. Brownian motion started from alpha, pushed through the
Gaussian-smoothed gradient of the conjugate potential, is a martingale
that starts at mu and ends at nu. The checks: terminal law against nu
(chi-square), martingale increments binned on the current state, and the
mean accumulated trace against the optimal value.

    python3 demos/simulate_bass.py [paths]
"""

import sys

import numpy as np

from bassdecomp.bassim import simulate, uniform_grid, verify_marginals, verify_martingale, verify_value
from bassdecomp.examples import ex61
from bassdecomp.paving import decompose


def main(paths=20_000):
    mu, nu, _, _ = ex61(200)
    res = decompose(mu, nu)
    for k, c in enumerate(res.components):
        pb = simulate(c.bass, paths, uniform_grid(64), seed=k)
        m = verify_marginals(pb, c.bass, c.mu_local, c.nu_local)
        g = verify_martingale(pb)
        v = verify_value(pb, c.primal_value)
        print(f"component {k} ({paths} paths, 64 steps)")
        print(f"  M_0 = source atom up to {m['start_deviation']:.1e}; "
              f"terminal chi-square p = {m['p_value']:.3f} on {m['dof']} dof")
        print(f"  martingale: max |z| {g['z_max']:.2f} over {g['tests']} binned tests "
              f"(critical {g['z_critical']:.2f})")
        print(f"  E trace {v['mean']:.4f} +/- {v['stderr']:.4f} vs P {v['expected']:.4f}")
        qs = np.quantile(pb.states[:, [0, 16, 32, 48, 64], 0], [0.1, 0.5, 0.9], axis=0)
        print("  quantiles of M_t at t = 0, 1/4, 1/2, 3/4, 1:")
        for q, row in zip((0.1, 0.5, 0.9), qs):
            print(f"    {q:.1f}: " + "  ".join(f"{x:+.3f}" for x in row))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20_000)
