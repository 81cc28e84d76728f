"""Linear programs over the discrete martingale transport polytope.

Variables are the masses pi_ij (row-major). Constraints are the source
marginals, the target marginals and, for every source atom, the d barycenter
equations ``sum_j pi_ij (y_j - x_i) = 0``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleError, MeasureError
from .measures import Coupling, potential_function
from .simplex import INFEASIBLE, OPTIMAL, solve_lp

REACH_TOL = 1e-9


@dataclass
class Infeasible:
    """Farkas certificate that no martingale transport exists.

    ``witness`` describes a convex function g = max_i (a_i + <h_i, y - x_i>)
    with  int g dmu > int g dnu.
    """

    farkas: np.ndarray
    witness: dict = field(default_factory=dict)

    def __bool__(self):
        return False


class MtPolytope:
    """Constraint data of MT(mu, nu) with a cached feasible basis."""

    def __init__(self, mu, nu):
        if mu.dim != nu.dim:
            raise MeasureError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
        self.mu, self.nu = mu, nu
        n, m, d = len(mu), len(nu), mu.dim
        self.shape = (n, m)
        A = np.zeros((n + m + d * n, n * m))
        for i in range(n):
            A[i, i * m:(i + 1) * m] = 1.0
            for c in range(d):
                A[n + m + d * i + c, i * m:(i + 1) * m] = nu.atoms[:, c] - mu.atoms[i, c]
        for j in range(m):
            A[n + j, j::m] = 1.0
        self.A = A
        self.b = np.concatenate([mu.weights, nu.weights, np.zeros(d * n)])
        self._basis = None
        self._feasible = None
        self._reach = None

    @property
    def n_constraints(self):
        return self.A.shape[0]

    def _solve(self, cost):
        res = solve_lp(cost, self.A, self.b, basis=self._basis)
        if res.status == OPTIMAL:
            self._basis = res.basis
        return res

    def feasible(self):
        if self._feasible is None:
            res = self._solve(np.zeros(self.A.shape[1]))
            if res.status == INFEASIBLE:
                self._feasible = Infeasible(res.farkas, self._witness(res.farkas))
            else:
                self._feasible = self._coupling(res.x)
        return self._feasible

    def _coupling(self, x):
        mass = np.maximum(x, 0.0).reshape(self.shape)
        return Coupling(mass)

    def optimize(self, cost):
        """Minimize <cost, pi> over MT(mu, nu); returns (Coupling, value)."""
        if not self.feasible():
            raise InfeasibleError("pair is not in convex order", self._feasible.witness)
        res = self._solve(np.asarray(cost, dtype=float).ravel())
        if res.status != OPTIMAL:
            raise RuntimeError(f"transport LP ended with status {res.status}")
        return self._coupling(res.x), res.fun

    def max_cell_mass(self, i, j):
        cost = np.zeros(self.A.shape[1])
        cost[i * self.shape[1] + j] = -1.0
        return max(0.0, -self.optimize(cost)[1])

    def reachability(self):
        """Boolean matrix R with R[i, j] iff some transport puts mass on (i, j).

        Repeatedly maximizes the total mass on pairs not yet seen; every
        solution adds its support, and the loop stops once the unseen pairs
        cannot carry more than ``REACH_TOL``.
        """
        if self._reach is not None:
            return self._reach
        if not self.feasible():
            raise InfeasibleError("pair is not in convex order", self._feasible.witness)
        seen = self._feasible.mass > REACH_TOL
        while not seen.all():
            cost = -(~seen).astype(float).ravel()
            pi, val = self.optimize(cost)
            if -val <= REACH_TOL:
                break
            new = (pi.mass > REACH_TOL) & ~seen
            if not new.any():
                # mass spread thinly over many pairs: settle them one by one
                for i, j in zip(*np.nonzero((pi.mass > 0) & ~seen)):
                    if self.max_cell_mass(i, j) > REACH_TOL:
                        new[i, j] = True
                if not new.any():
                    break
            seen |= new
        self._reach = seen
        return seen

    def _witness(self, y):
        n, m = self.shape
        d = self.mu.dim
        a = y[:n]
        h = y[n + m:].reshape(n, d)
        mu, nu = self.mu, self.nu

        def g(pts):
            rel = pts[:, None, :] - mu.atoms[None, :, :]
            return (a[None, :] + (rel * h[None]).sum(-1)).max(axis=1)

        gap = float(mu.weights @ g(mu.atoms) - nu.weights @ g(nu.atoms))
        out = {"kind": "max_affine", "anchors": mu.atoms.tolist(), "intercepts": a.tolist(),
               "slopes": h.tolist(), "gap": gap}
        bm, bn = mu.barycenter, nu.barycenter
        if np.abs(bm - bn).max() > 1e-9:
            out["barycenter_mismatch"] = (bm - bn).tolist()
        if d == 1:
            grid = np.unique(np.concatenate([mu.atoms[:, 0], nu.atoms[:, 0]]))
            diff = potential_function(mu, grid) - potential_function(nu, grid)
            k = int(np.argmax(diff))
            out["strike"] = float(grid[k])
            out["potential_gap"] = float(diff[k])
        return out


def feasible(mu, nu):
    """Coupling in MT(mu, nu), or an :class:`Infeasible` certificate."""
    return MtPolytope(mu, nu).feasible()


def max_cell_mass(mu, nu, i, j):
    """max pi_ij over all martingale transports."""
    return MtPolytope(mu, nu).max_cell_mass(i, j)


def reachable_set(mu, nu, i):
    """Indices j with max_cell_mass(i, j) > 1e-9."""
    return np.nonzero(MtPolytope(mu, nu).reachability()[i])[0]
