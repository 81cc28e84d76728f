"""Uniform circle against a two-circle target.

mu is uniform on the unit circle (n atoms) and nu mixes the circles of
radius 1/2 and R evenly, at the same angles. Convex order needs R >= 3/2.
At R = 3/2 every source atom x must split into x/2 and 3x/2, so the paving
is n radial segments. Past the threshold the radial Bass map with a kink at
the median k(rho) produces a single irreducible component; R(rho) solves
its barycenter condition and decreases towards 3/2.

    python3 demos/circles.py [n]
"""

import sys
import time

import numpy as np

from bassdecomp import motlp
from bassdecomp.examples import circles, kink, radius_for
from bassdecomp.paving import decompose


def main(n=24):
    for R in (1.4, 1.5):
        print(f"R = {R}: convex order {'holds' if motlp.feasible(*circles(n, R)) else 'fails'}")

    t0 = time.perf_counter()
    mu, nu = circles(n, 1.5)
    res = decompose(mu, nu)
    kinds = {c.cell.kind for c in res.components}
    print(f"R = 1.5: {len(res.components)} components of kind {sorted(kinds)} "
          f"({time.perf_counter() - t0:.0f}s)")
    c = res.components[0]
    x = mu.atoms[c.mu_indices[0]]
    print(f"  first cell {np.round(c.cell.vertices, 4).tolist()} for x = {np.round(x, 4).tolist()}")

    print("rho    k(rho)   R(rho)")
    radii = {}
    for rho in (1, 2, 4):
        radii[rho] = radius_for(rho)
        print(f"{rho:<6} {kink(rho):.4f}   {radii[rho]:.4f}")

    t0 = time.perf_counter()
    mu, nu = circles(n, radii[4])
    res = decompose(mu, nu)
    c = res.components[0]
    print(f"R = R(4): {len(res.components)} component, {c.cell.kind} cell, P {c.primal_value:.5f}, "
          f"gap {c.gap:.1e} ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 24)
