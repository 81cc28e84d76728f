"""Dual functional of the Gaussian-reference martingale transport problem.

For a convex potential psi on the target atoms,

    D(psi) = sum_j nu_j psi_j - sum_i mu_i (psi^* * gamma)^*(x_i).

D is convex, continuously differentiable and unchanged by affine shifts of
psi. Its gradient is nu minus the column sums of the induced coupling whose
rows are the Laguerre masses of psi^* seen from the Bass points b_i^*.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .convexfn import MCConfig, PwaPotential, Smoother, _affine_frame, lower_convex_envelope
from .errors import MeasureError
from .gaussmcov import mcov_rows
from .measures import Coupling, DiscreteMeasure


@dataclass
class DualState:
    """Dual value, gradient and induced primal objects at a potential.

    Attributes
    ----------
    psi : PwaPotential
    dual_value : float
    gradient : ndarray
        nu_j minus the mass the induced coupling sends to atom j.
    bass_points : ndarray, shape (n_mu, d)
    induced : Coupling
    primal_value : float
        sum_i mu_i MCov(pi_{x_i}, gamma) for the induced coupling.
    gap : float
    stderr : float
        Monte Carlo standard error of the dual value (zero in exact mode).
    """

    psi: PwaPotential
    dual_value: float
    gradient: np.ndarray
    bass_points: np.ndarray
    induced: Coupling
    primal_value: float
    gap: float
    stderr: float = 0.0
    primal_stderr: float = 0.0
    exact: bool = True


def _dual_core(values, atoms, mu, nu_w, mc, b0=None):
    psi = PwaPotential(atoms, values)
    env = lower_convex_envelope(psi)
    sm = Smoother(env, 1.0, mc)
    r = sm.conjugate(mu.atoms, b0)
    D = float(nu_w @ values - mu.weights @ r["value"])
    rows = r["mass"]
    grad = nu_w - mu.weights @ rows
    return D, grad, r, sm


def eval_dual(psi, mu, nu, mc=None, b0=None):
    """Evaluate D(psi) together with the induced coupling and primal value.

    Every source atom must lie in the open relative interior of the hull of
    the target atoms; otherwise :class:`BoundaryAtom` is raised.
    """
    if len(psi) != len(nu):
        raise ValueError("potential must have one value per target atom")
    D, grad, r, sm = _dual_core(psi.values, nu.atoms, mu, nu.weights, mc, b0)
    rows = r["mass"]
    P = float(mu.weights @ r["primal"])
    se = float(np.sqrt(((mu.weights * r["stderr"]) ** 2).sum()))
    pse = float(np.sqrt(((mu.weights * r.get("primal_stderr", np.zeros(len(mu)))) ** 2).sum()))
    return DualState(psi, D, grad, r["point"], Coupling(mu.weights[:, None] * rows), P, D - P,
                     se, pse, sm.exact)


def primal_from_coupling(pi, mu, nu, mc=None, tol=1e-6):
    """sum_i mu_i MCov(pi_{x_i}, gamma) for a martingale coupling."""
    defect = pi.barycenter_defect(mu, nu)
    if defect > tol:
        raise MeasureError(f"coupling barycenter defect {defect:.3g} exceeds {tol:g}")
    rs = pi.row_sums()
    vals, _ = mcov_rows(pi.mass, nu.atoms, mc)
    return float(rs @ vals)


@dataclass
class SolveConfig:
    """Settings for :func:`solve_dual`.

    ``tol`` bounds the sup-norm of the dual gradient (the column-marginal
    error of the induced coupling). ``budget`` is the cap reported against
    the partial sums of the suboptimality ledger.

    ``method`` is ``"auto"`` (default), ``"newton"`` or ``"lbfgs"``.
    Newton steps use the exact Hessian of the smoothed dual inside a trust
    region. ``"auto"`` runs L-BFGS until the gradient drops below
    ``switch_tol`` (or for ``switch_iter`` iterations) and then switches to
    Newton. On reducible pairs the optimum sits at infinity and first-order
    methods only shrink the cross-component leakage like 1/iterations,
    while Newton steps make it decay geometrically.
    """

    tol: float = 1e-9
    max_iter: int = 3000
    memory: int = 12
    mc: MCConfig = field(default_factory=MCConfig)
    budget: float = float("inf")
    keep_potentials: bool = True
    init: np.ndarray = None
    method: str = "auto"
    switch_tol: float = 1e-4
    switch_iter: int = 50


@dataclass
class SolveTrace:
    """Iterate history of :func:`solve_dual`.

    ``potentials[n]`` are the envelope values psi_n on the target atoms that
    the solver actually worked with (``nu_index``); atoms removed up front
    because they only receive mass from boundary source atoms are not
    included. ``subopt`` holds S_n = D_n - L where L is the best lower
    estimate of the optimal value seen during the run.
    """

    dual: list = field(default_factory=list)
    primal: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    potentials: list = field(default_factory=list)
    converged: bool = False
    status: str = "running"
    mu_index: np.ndarray = None
    nu_index: np.ndarray = None
    delta_pairs: list = field(default_factory=list)
    scale: float = 1.0
    budget: float = float("inf")

    @property
    def iterations(self):
        return len(self.dual)

    @property
    def lower_bound(self):
        if not self.dual:
            return float("nan")
        return min(min(self.dual), max(self.primal))

    @property
    def subopt(self):
        return np.maximum(np.asarray(self.dual) - self.lower_bound, 0.0)

    @property
    def fast_convergence_certificate(self):
        """Partial sums of S_n."""
        return np.cumsum(self.subopt)

    def records(self):
        S = self.fast_convergence_certificate
        for n in range(self.iterations):
            yield {"iter": n, "dual": self.dual[n], "primal": self.primal[n],
                   "gap": self.dual[n] - self.primal[n], "grad_norm": self.grad_norm[n],
                   "S_partial_sum": float(S[n])}

    def to_jsonl(self):
        from ._jsonio import dumps
        return "".join(dumps(r) + "\n" for r in self.records())


def _boundary_split(mu, nu):
    """Peel off source atoms sitting on extreme points of the target hull.

    Such an atom can only be transported to itself. Returns the reduced
    measures (unnormalized weights), their index maps and the delta pairs.
    Raises BoundaryAtom for atoms on a face that is not a single point.
    """
    mw = mu.weights.copy()
    nw = nu.weights.copy()
    pairs = []
    tol_w = 1e-14
    while True:
        live_nu = np.nonzero(nw > tol_w)[0]
        live_mu = np.nonzero(mw > tol_w)[0]
        if len(live_mu) == 0:
            break
        Y = nu.atoms[live_nu]
        scale = max(1.0, np.abs(Y).max())
        p0, basis = _affine_frame(Y)
        moved = False
        if len(basis) == 0:
            ext = [0]
        elif len(basis) == 1:
            t = (Y - p0) @ basis[0]
            ext = [int(np.argmin(t)), int(np.argmax(t))]
        else:
            ext = list(ConvexHull(Y).vertices)
        for e in ext:
            j = live_nu[e]
            hit = live_mu[np.linalg.norm(mu.atoms[live_mu] - nu.atoms[j], axis=1) <= 1e-12 * scale]
            for i in hit:
                m = min(mw[i], nw[j])
                if mw[i] > nw[j] + 1e-12:
                    raise MeasureError("source atom at an extreme target atom exceeds its weight")
                pairs.append((int(i), int(j), float(m)))
                nw[j] -= m
                mw[i] = 0.0
                moved = True
        if not moved:
            break
    keep_mu = np.nonzero(mw > tol_w)[0]
    keep_nu = np.nonzero(nw > tol_w)[0]
    return keep_mu, mw[keep_mu], keep_nu, nw[keep_nu], pairs


class _Objective:
    def __init__(self, mu, atoms, nu_w, mc):
        self.mu, self.atoms, self.nu_w, self.mc = mu, atoms, nu_w, mc
        self.b = None
        self.calls = 0

    def __call__(self, values, b0=None):
        self.calls += 1
        D, grad, r, sm = _dual_core(values, self.atoms, self.mu, self.nu_w, self.mc,
                                    self.b if b0 is None else b0)
        r["smoother"] = sm
        return D, grad, r


def _hessian(sm, r, mu_w):
    """Hessian of D restricted to the envelope vertices ``sm.vert``.

    Each source atom contributes the Schur complement
    J - J Y (Y' J Y)^+ Y' J of the intercept Jacobian J, which accounts for
    the Bass point moving with psi.
    """
    J, Yc = sm.intercept_jacobian(r["point"])
    m = J.shape[1]
    H = np.zeros((m, m))
    for w, Ji in zip(mu_w, J):
        JY = Ji @ Yc
        Hf = Yc.T @ JY
        H += w * (Ji - JY @ np.linalg.pinv(Hf, rcond=1e-14, hermitian=True) @ JY.T)
    return 0.5 * (H + H.T)


def _newton_direction(atoms, g, r, mu_w, radius):
    """Trust-region Newton step (H + lam I) p = -g with |p|_inf <= radius.

    The affine directions, along which D is constant, are projected out
    first. lam = 0 (the plain Newton step) is used whenever it fits in the
    trust region; otherwise lam is found by bisection. The shift keeps the
    step bounded where a cell carries almost no Gaussian mass and D is
    locally flat. Atoms off the envelope move along -g scaled by a typical
    curvature.
    """
    sm = r["smoother"]
    vert = sm.vert
    H = _hessian(sm, r, mu_w)
    Yv = atoms[vert]
    null = np.column_stack([np.ones(len(vert)), Yv])
    qn, _ = np.linalg.qr(null)
    # orthonormal complement of the affine directions
    proj = np.eye(len(vert)) - qn @ qn.T
    w, V = np.linalg.eigh(proj @ H @ proj)
    w = np.maximum(w, 0.0)
    c = V.T @ (proj @ g[vert])
    # directions that carry no gradient are dropped to avoid 0/0
    live = np.abs(c) > 1e-300
    diag = np.diag(H)
    h_ref = float(np.median(diag[diag > 0])) if (diag > 0).any() else 1.0
    rest = np.setdiff1d(np.arange(len(g)), vert)

    def step(lam):
        p = np.zeros(len(g))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            coef = np.where(live, -c / (w + lam), 0.0)
            p[vert] = proj @ (V @ coef)
        if len(rest):
            p[rest] = -g[rest] / (h_ref + lam)
        return p

    p = step(0.0)
    if np.all(np.isfinite(p)) and np.abs(p).max() <= radius:
        return p
    lo, hi = 0.0, max(float(w.max(initial=0.0)), h_ref, 1e-300)
    while np.abs(step(hi)).max() > radius:
        hi *= 4.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.abs(step(mid)).max() > radius:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-6 * hi:
            break
    return step(hi)


def initial_potential(atoms, weights):
    """|y - bary|^2 / (2 sigma) with sigma the root mean variance of the target.

    This is the optimal potential for a point mass against a Gaussian
    target of covariance sigma^2 I, so the starting slopes have the spread
    of Gaussian quantiles and every Laguerre cell carries visible mass.
    """
    bary = weights @ atoms
    c = atoms - bary
    sigma = np.sqrt((weights @ (c ** 2).sum(1)) / atoms.shape[1])
    return 0.5 * (c ** 2).sum(1) / max(sigma, 1e-300)


def _envelope(atoms, values):
    return lower_convex_envelope(PwaPotential(atoms, values)).values.copy()


def solve_dual(mu, nu, config=None):
    """Minimize D over convex potentials on the target atoms.

    Uses limited-memory BFGS directions with Armijo backtracking. After each
    step the values are projected onto their lower convex envelope, which
    never increases D. Source atoms on extreme points of the target hull are
    transported to themselves and removed before the iteration.

    Returns
    -------
    trace : SolveTrace
    state : DualState
        Final state on the original atoms.
    """
    cfg = config or SolveConfig()
    if mu.dim != nu.dim:
        raise MeasureError("dimension mismatch")
    keep_mu, mw, keep_nu, nw, pairs = _boundary_split(mu, nu)
    T = float(mw.sum())
    trace = SolveTrace(mu_index=keep_mu, nu_index=keep_nu, delta_pairs=pairs, scale=T, budget=cfg.budget)
    if len(keep_mu) == 0:
        trace.converged, trace.status = True, "trivial"
        return trace, _assemble(mu, nu, trace, None, None)
    mu_r = DiscreteMeasure.trusted(mu.atoms[keep_mu], mw / T)
    nu_w = nw / nw.sum()
    atoms = nu.atoms[keep_nu]
    obj = _Objective(mu_r, atoms, nu_w, cfg.mc)

    x = cfg.init[keep_nu].astype(float) if cfg.init is not None else initial_potential(atoms, nu_w)
    x = _envelope(atoms, x)
    D, g, r = obj(x)
    obj.b = r["point"]
    S, Yk = [], []
    radius = max(1.0, float(np.ptp(atoms, axis=0).max()))
    c1 = 1e-4
    eps = np.finfo(float).eps

    def record(D, g, r, x):
        trace.dual.append(D)
        trace.primal.append(float(mu_r.weights @ r["primal"]))
        trace.grad_norm.append(float(np.abs(g).max()))
        if cfg.keep_potentials:
            trace.potentials.append(x.copy())

    record(D, g, r, x)
    for it in range(cfg.max_iter):
        if np.abs(g).max() <= cfg.tol:
            trace.converged, trace.status = True, "converged"
            break
        newton = cfg.method == "newton" or (cfg.method == "auto" and (
            np.abs(g).max() <= cfg.switch_tol or it >= cfg.switch_iter))
        if newton:
            p = _newton_direction(atoms, g, r, mu_r.weights, radius)
            slope = g @ p
            if not slope < 0:
                p = -g
                slope = g @ p
        else:
            # two-loop recursion
            q = g.copy()
            alphas = []
            for s, y in reversed(list(zip(S, Yk))):
                rho = 1.0 / (y @ s)
                a = rho * (s @ q)
                alphas.append((a, rho, s, y))
                q -= a * y
            if S:
                q *= (S[-1] @ Yk[-1]) / (Yk[-1] @ Yk[-1])
            for a, rho, s, y in reversed(alphas):
                bcoef = rho * (y @ q)
                q += (a - bcoef) * s
            p = -q
            slope = g @ p
            if not slope < 0:
                S.clear(), Yk.clear()
                p = -g
                slope = g @ p
        t = 1.0
        if not S and not newton:
            t = min(1.0, 1.0 / max(np.abs(p).max(), 1e-300))
        accepted = False
        for _ in range(60):
            xn = _envelope(atoms, x + t * p)
            Dn, gn, rn = obj(xn)
            if Dn <= D + c1 * t * slope + 8 * eps * max(1.0, abs(D)):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            trace.status = "stalled"
            break
        if newton:
            pn = float(np.abs(p).max())
            radius = max(radius, 2.0 * pn) if t == 1.0 else max(t * pn, 1e-12)
        s = xn - x
        y = gn - g
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Yk.append(y)
            if len(S) > cfg.memory:
                S.pop(0), Yk.pop(0)
        x, D, g, r = xn, Dn, gn, rn
        obj.b = r["point"]
        record(D, g, r, x)
    else:
        trace.status = "max_iter"
    if np.abs(g).max() <= cfg.tol:
        trace.converged, trace.status = True, "converged"
    state_r = eval_dual(PwaPotential(atoms, x), mu_r, DiscreteMeasure.trusted(atoms, nu_w), cfg.mc, obj.b)
    return trace, _assemble(mu, nu, trace, state_r, x)


def _convex_extension(atoms, values, pts):
    """Values at pts of a convex function agreeing with the envelope on atoms."""
    p = lower_convex_envelope(PwaPotential(atoms, values))
    info = p.envelope_info()
    if info.kind == "point":
        return np.full(len(pts), info.env[0])
    if info.kind == "line":
        t = (pts - info.origin) @ info.direction
        if len(info.vtau) == 1:
            return np.full(len(pts), info.vval[0])
        pieces = info.vval[:-1, None] + info.slopes[:, None] * (t[None, :] - info.vtau[:-1, None])
        return pieces.max(axis=0)
    return (pts @ info.facet_grad.T + info.facet_off).max(axis=1)


def _assemble(mu, nu, trace, st, x):
    """Lift a reduced-problem state back to the original atoms."""
    T = trace.scale
    mass = np.zeros((len(mu), len(nu)))
    for i, j, m in trace.delta_pairs:
        mass[i, j] += m
    values = 0.5 * (nu.atoms ** 2).sum(1)
    bass = np.zeros((len(mu), mu.dim))
    if st is None:
        pi = Coupling(mass)
        return DualState(PwaPotential(nu.atoms, values), 0.0, nu.weights - pi.col_sums(), bass,
                         pi, 0.0, 0.0)
    ki, kj = trace.mu_index, trace.nu_index
    mass[np.ix_(ki, kj)] += T * st.induced.mass
    values = _convex_extension(nu.atoms[kj], x, nu.atoms)
    values[kj] = x
    bass[ki] = st.bass_points
    pi = Coupling(mass)
    return DualState(PwaPotential(nu.atoms, values), T * st.dual_value, nu.weights - pi.col_sums(),
                     bass, pi, T * st.primal_value, T * st.gap, T * st.stderr, T * st.primal_stderr,
                     st.exact)
