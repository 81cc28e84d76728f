"""Dense two-phase revised simplex for ``min c.x  s.t.  A x = b, x >= 0``.

The basis inverse is kept explicitly, updated by rank-one pivots and
recomputed from scratch every ``refactor`` iterations. Pricing is Dantzig's
rule; after a run of degenerate pivots it switches to Bland's rule, which
cannot cycle, until a pivot makes progress again.
"""

from dataclasses import dataclass

import numpy as np

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


class LPNumericalError(RuntimeError):
    pass


@dataclass
class LPResult:
    """Outcome of :func:`solve_lp`.

    Attributes
    ----------
    status : str
        ``"optimal"``, ``"infeasible"`` or ``"unbounded"``.
    x : ndarray or None
        Primal solution (structural variables only).
    fun : float
        Objective value at ``x``.
    y : ndarray or None
        Equality-constraint duals at the optimum.
    farkas : ndarray or None
        For infeasible problems, a vector with ``A.T @ farkas <= 0`` and
        ``b @ farkas > 0``.
    basis : ndarray
        Final basis; columns ``>= n`` are artificial slacks of redundant rows.
        Can be passed back as a warm start for the same ``A`` and ``b``.
    """

    status: str
    x: np.ndarray = None
    fun: float = float("nan")
    y: np.ndarray = None
    farkas: np.ndarray = None
    basis: np.ndarray = None
    iterations: int = 0
    residual: float = 0.0


class _Tableau:
    def __init__(self, A, b, basis, refactor):
        self.A = A
        self.b = b
        self.basis = np.array(basis, dtype=int)
        self.refactor = refactor
        self.since = 0
        self.factor()

    def factor(self):
        Bm = self.A[:, self.basis]
        try:
            self.Binv = np.linalg.inv(Bm)
        except np.linalg.LinAlgError:
            raise LPNumericalError("singular basis") from None
        self.xB = self.Binv @ self.b
        self.since = 0

    def pivot(self, r, q, u):
        Binv = self.Binv
        piv = u[r]
        row = Binv[r] / piv
        Binv -= np.outer(u, row)
        Binv[r] = row
        theta = self.xB[r] / piv
        self.xB -= theta * u
        self.xB[r] = theta
        self.basis[r] = q
        self.since += 1
        if self.since >= self.refactor:
            self.factor()


def _iterate(tab, cost, allowed, max_iter, tol_rc, tol_piv, bland_after):
    """Run simplex pivots on ``tab``; return (status, iterations)."""
    degenerate = 0
    A = tab.A
    for it in range(max_iter):
        np.maximum(tab.xB, 0.0, out=tab.xB)
        y = cost[tab.basis] @ tab.Binv
        d = cost - y @ A
        d[~allowed] = 0.0
        d[tab.basis] = 0.0
        cand = np.nonzero(d < -tol_rc)[0]
        if len(cand) == 0:
            return OPTIMAL, it
        use_bland = degenerate >= bland_after
        q = cand[0] if use_bland else cand[np.argmin(d[cand])]
        u = tab.Binv @ A[:, q]
        pos = u > tol_piv
        if not pos.any():
            return UNBOUNDED, it
        ratios = np.full(len(u), np.inf)
        ratios[pos] = tab.xB[pos] / u[pos]
        tmin = ratios.min()
        ties = np.nonzero(ratios <= tmin + 1e-12 * max(1.0, tmin))[0]
        if use_bland:
            r = ties[np.argmin(tab.basis[ties])]
        else:
            r = ties[np.argmax(u[ties])]
        degenerate = degenerate + 1 if tmin <= 1e-14 else 0
        tab.pivot(r, q, u)
    return "iteration_limit", max_iter


def solve_lp(c, A, b, basis=None, *, max_iter=None, tol=1e-9, refactor=50, bland_after=30):
    """Solve a standard-form LP.

    Parameters
    ----------
    c : array_like, shape (n,)
    A : array_like, shape (m, n)
    b : array_like, shape (m,)
    basis : array_like of int, optional
        Warm-start basis from a previous call with the same ``A`` and ``b``.
        Ignored when it is not primal feasible.

    Returns
    -------
    LPResult
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    m, n = A.shape
    sign = np.where(b < 0, -1.0, 1.0)
    As = np.hstack([A * sign[:, None], np.eye(m)])
    bs = b * sign
    max_iter = max_iter or 50 * (m + n) + 1000
    scale_c = max(1.0, np.abs(c).max()) if n else 1.0
    tol_piv = 1e-9
    allowed = np.ones(n + m, dtype=bool)
    total = 0

    tab = None
    if basis is not None:
        try:
            tab = _Tableau(As, bs, basis, refactor)
            if tab.xB.min() < -tol or len(set(tab.basis.tolist())) != m:
                tab = None
        except LPNumericalError:
            tab = None

    if tab is None:
        tab = _Tableau(As, bs, np.arange(n, n + m), refactor)
        cost1 = np.concatenate([np.zeros(n), np.ones(m)])
        status, its = _iterate(tab, cost1, allowed, max_iter, 1e-12, tol_piv, bland_after)
        total += its
        if status != OPTIMAL:
            raise LPNumericalError(f"phase 1 ended with status {status}")
        tab.factor()
        infeas = float(cost1[tab.basis] @ tab.xB)
        if infeas > tol * max(1.0, np.abs(bs).max()):
            y = cost1[tab.basis] @ tab.Binv
            return LPResult(INFEASIBLE, farkas=y * sign, basis=tab.basis.copy(),
                            iterations=total, fun=infeas)
        # drive artificials out of the basis where possible
        for r in range(m):
            if tab.basis[r] < n:
                continue
            row = tab.Binv[r] @ As[:, :n]
            row[tab.basis[tab.basis < n]] = 0.0
            j = int(np.argmax(np.abs(row)))
            if abs(row[j]) > 1e-7:
                tab.pivot(r, j, tab.Binv @ As[:, j])
        tab.factor()

    allowed[n:] = False
    cost2 = np.concatenate([c, np.zeros(m)])
    status, its = _iterate(tab, cost2, allowed, max_iter, 1e-11 * scale_c, tol_piv, bland_after)
    total += its
    if status == UNBOUNDED:
        return LPResult(UNBOUNDED, basis=tab.basis.copy(), iterations=total)
    if status != OPTIMAL:
        raise LPNumericalError(f"phase 2 ended with status {status}")
    tab.factor()
    full = np.zeros(n + m)
    full[tab.basis] = np.maximum(tab.xB, 0.0)
    x = full[:n]
    resid = float(np.abs(A @ x - b).max()) if m else 0.0
    y = (cost2[tab.basis] @ tab.Binv) * sign
    return LPResult(OPTIMAL, x=x, fun=float(c @ x), y=y, basis=tab.basis.copy(),
                    iterations=total, residual=resid)
