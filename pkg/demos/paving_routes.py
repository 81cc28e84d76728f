"""Three independent ways to find the irreducible components.

The LP route asks, atom pair by atom pair, whether any martingale transport
can move mass between them. The potential route looks for contact points
of u_mu and u_nu. The dual route watches which normalized dual potentials
stay bounded while the solver runs. They share no code beyond the final
merge, so agreement is a real cross-check.

    python3 demos/paving_routes.py [instances]
"""

import sys

import numpy as np

from bassdecomp.dualsolve import solve_dual
from bassdecomp.examples import random_split_pair
from bassdecomp.paving import compare_partitions, pave_dual_divergence, pave_lp, pave_potential_1d


def main(count=100, seed=3):
    rng = np.random.default_rng(seed)
    agree = {"potential-1d": 0, "dual-divergence": 0}
    sizes = []
    for k in range(count):
        mu, nu = random_split_pair(rng, 4, 12, grid=0.25, keep_prob=0.15)
        lp = pave_lp(mu, nu)
        trace, _ = solve_dual(mu, nu)
        others = {"potential-1d": pave_potential_1d(mu, nu),
                  "dual-divergence": pave_dual_divergence(trace, mu, nu)}
        for name, p in others.items():
            agree[name] += compare_partitions(lp, p)["agree"]
        sizes.append(len(lp.components))
        if k == 0:
            print(f"first instance: mu atoms {np.round(mu.atoms[:, 0], 2).tolist()}")
            print(f"  nu atoms {np.round(nu.atoms[:, 0], 2).tolist()}")
            print(f"  partition {sorted(sorted(b) for b in lp.partition())}")
            drift = others["dual-divergence"].stats["drift"]
            print(f"  tail drift of normalized potentials (rows: mu atoms):\n{np.round(drift, 3)}")
    print(f"{count} instances, components per instance: {np.bincount(sizes).tolist()} (index = count)")
    for name, a in agree.items():
        print(f"  lp vs {name}: {a}/{count}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 100)
