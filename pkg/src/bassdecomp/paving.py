"""Bass paving of a discrete pair in convex order.

Three routes produce a partition of the source atoms into components:

* ``pave_lp`` uses reachable sets from the transport LP (authoritative),
* ``pave_potential_1d`` uses contact points of the 1D potential functions,
* ``pave_dual_divergence`` reads the partition off the iterates of the dual
  solver: potentials normalized at a source atom stay bounded on its own
  cell and drift away elsewhere.

:func:`disintegrate` splits the measures along a paving and
:func:`decompose` runs the whole pipeline, fitting one Bass model per
component.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import _jsonio
from .bassim import BassModel
from .cells import ConvexCell
from .convexfn import MCConfig, PwaPotential, normalize_at
from .dualsolve import SolveConfig, solve_dual
from .errors import CrossLeak, InfeasibleError, MeasureError, NonConvergence, PavingDisagreement
from .measures import Coupling, DiscreteMeasure, potential_function
from .motlp import REACH_TOL, MtPolytope

LEAK_TOL = 1e-8


@dataclass
class PavingComponent:
    """One cell of the paving with its share of the measures.

    ``nu_indices`` are the target atoms in the closed cell that the
    component can reach. ``mu_local``/``nu_local`` are filled in by
    :func:`disintegrate`; ``nu_local_indices`` maps the atoms of
    ``nu_local`` back to the target measure.
    """

    cell: ConvexCell
    mu_indices: np.ndarray
    nu_indices: np.ndarray
    kappa_weight: float
    mu_local: DiscreteMeasure = None
    nu_local: DiscreteMeasure = None
    nu_local_indices: np.ndarray = None
    bass: BassModel = None
    primal_value: float = None
    dual_value: float = None
    gap: float = None
    irreducible: bool = None

    def to_json(self):
        out = {"cell": self.cell.to_json(), "mu_indices": [int(i) for i in self.mu_indices],
               "nu_indices": [int(j) for j in self.nu_indices], "kappa": float(self.kappa_weight)}
        if self.mu_local is not None:
            out["mu_local"] = self.mu_local.to_json()
            out["nu_local"] = self.nu_local.to_json()
            out["nu_local_indices"] = [int(j) for j in self.nu_local_indices]
        for key in ("primal_value", "dual_value", "gap", "irreducible"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val if isinstance(val, bool) else float(val)
        if self.bass is not None:
            out["bass"] = self.bass.to_json()
        return out

    @classmethod
    def from_json(cls, obj):
        comp = cls(ConvexCell.from_json(obj["cell"]), np.array(obj["mu_indices"], dtype=int),
                   np.array(obj["nu_indices"], dtype=int), float(obj["kappa"]))
        if "mu_local" in obj:
            comp.mu_local = DiscreteMeasure.from_json(obj["mu_local"])
            comp.nu_local = DiscreteMeasure.from_json(obj["nu_local"])
            comp.nu_local_indices = np.array(obj["nu_local_indices"], dtype=int)
        for key in ("primal_value", "dual_value", "gap", "irreducible"):
            if key in obj:
                setattr(comp, key, obj[key])
        if "bass" in obj:
            comp.bass = BassModel.from_json(obj["bass"])
        return comp


@dataclass
class PavingResult:
    """Components partitioning the source atoms, with provenance."""

    components: list
    method: str
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    agreement_report: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def partition(self):
        return partition_of(self.components)

    def component_of(self, i):
        for k, c in enumerate(self.components):
            if i in c.mu_indices:
                return k
        raise KeyError(i)

    def to_json(self):
        return {"method": self.method, "mu": self.mu.to_json(), "nu": self.nu.to_json(),
                "components": [c.to_json() for c in self.components],
                "agreement": self.agreement_report}

    @classmethod
    def from_json(cls, obj):
        return cls([PavingComponent.from_json(c) for c in obj["components"]], obj["method"],
                   DiscreteMeasure.from_json(obj["mu"]), DiscreteMeasure.from_json(obj["nu"]),
                   obj.get("agreement", {}))

    def dumps(self):
        return _jsonio.dumps(self.to_json())


def partition_of(components):
    return frozenset(frozenset(int(i) for i in c.mu_indices) for c in components)


def compare_partitions(a, b):
    """Agreement summary of two pavings of the same source measure."""
    pa, pb = a.partition(), b.partition()
    return {"methods": [a.method, b.method], "agree": pa == pb,
            "only_first": sorted(sorted(s) for s in pa - pb),
            "only_second": sorted(sorted(s) for s in pb - pa)}


def _merge_groups(mu, nu, groups):
    """Merge (mu_set, nu_set) groups to the fixpoint of the paving rules.

    Two groups merge when a source atom of one lies in the relative interior
    of the other's cell or when the relative interiors of their cells meet.
    The smallest source index decides the order, which makes the result
    deterministic.
    """
    groups = [(sorted(m), sorted(n)) for m, n in groups]
    while True:
        groups.sort(key=lambda g: g[0][0])
        cells = [ConvexCell.hull(nu.atoms[n]) for _, n in groups]
        merged = False
        for a in range(len(groups)):
            for b in range(a + 1, len(groups)):
                ca, cb = cells[a], cells[b]
                touch = (any(ca.ri_contains(mu.atoms[i]) for i in groups[b][0])
                         or any(cb.ri_contains(mu.atoms[i]) for i in groups[a][0])
                         or ca.ri_intersects(cb))
                if touch:
                    ga, gb = groups[a], groups[b]
                    groups[a] = (sorted(set(ga[0]) | set(gb[0])), sorted(set(ga[1]) | set(gb[1])))
                    del groups[b]
                    merged = True
                    break
            if merged:
                break
        if not merged:
            return [(np.array(m), np.array(n), c) for (m, n), c in zip(groups, cells)]


def _components(mu, groups):
    return [PavingComponent(cell, m, n, float(mu.weights[m].sum())) for m, n, cell in groups]


def pave_lp(mu, nu, polytope=None):
    """Paving from reachable sets of the martingale transport LP.

    Parameters
    ----------
    polytope : MtPolytope, optional
        Reused when given, so its cached basis and reachability are shared.
    """
    mt = polytope or MtPolytope(mu, nu)
    if not mt.feasible():
        raise InfeasibleError("pair is not in convex order", mt.feasible().witness)
    reach = mt.reachability()
    groups = [([i], list(np.nonzero(reach[i])[0])) for i in range(len(mu))]
    return PavingResult(_components(mu, _merge_groups(mu, nu, groups)), "lp", mu, nu)


def pave_potential_1d(mu, nu, tol=1e-10):
    """Paving from the set where the potential functions differ.

    Components are the maximal open intervals of {u_mu < u_nu} together
    with point components for source atoms where the two potentials touch.
    """
    if mu.dim != 1 or nu.dim != 1:
        raise MeasureError("pave_potential_1d needs one-dimensional measures")
    grid = np.unique(np.concatenate([mu.atoms[:, 0], nu.atoms[:, 0]]))
    scale = max(1.0, np.abs(grid).max())
    diff = potential_function(nu, grid) - potential_function(mu, grid)
    if diff.min() < -1e-9 * scale:
        raise InfeasibleError("pair is not in convex order",
                              {"strike": float(grid[np.argmin(diff)]), "potential_gap": float(-diff.min())})
    pos = diff > tol * scale
    # the difference is piecewise linear, so it is positive on the open
    # segment between neighbouring grid points unless both ends vanish
    open_seg = pos[:-1] | pos[1:]
    intervals = []
    k = 0
    while k < len(open_seg):
        if open_seg[k]:
            start = k
            k += 1
            # a zero of the difference at a grid point ends the interval
            while k < len(open_seg) and open_seg[k] and pos[k]:
                k += 1
            intervals.append((grid[start], grid[k]))
        else:
            k += 1
    x = mu.atoms[:, 0]
    y = nu.atoms[:, 0]
    ttol = 1e-12 * scale
    comps = []
    assigned = np.zeros(len(mu), dtype=bool)
    for lo, hi in intervals:
        members = np.nonzero((x > lo + ttol) & (x < hi - ttol))[0]
        if len(members) == 0:
            continue
        assigned[members] = True
        nus = np.nonzero((y >= lo - ttol) & (y <= hi + ttol))[0]
        comps.append((members, nus, ConvexCell("segment", [[lo], [hi]])))
    for i in np.nonzero(~assigned)[0]:
        nus = np.nonzero(np.abs(y - x[i]) <= ttol)[0]
        comps.append((np.array([i]), nus, ConvexCell("point", [[x[i]]])))
    comps.sort(key=lambda c: c[0][0])
    return PavingResult(_components(mu, comps), "potential-1d", mu, nu)


@dataclass(frozen=True)
class DivergenceConfig:
    """Settings of the dual-divergence classifier.

    The statistic for a source atom x_i and target atom y_j is the largest
    change of the potential normalized at x_i over the tail of the iterate
    history, the tail starting at the first iterate whose gradient norm is
    at most ``start_grad`` and holding at least ``min_tail`` iterates.
    Atoms with statistic at most ``threshold`` are classified as bounded.
    The threshold is in potential units and is not rescaled by the support.
    """

    start_grad: float = 1e-4
    threshold: float = 3e-2
    min_iters: int = 1
    min_tail: int = 2
    eps0: float = 1.0


def _tail_start(trace, cfg):
    g = np.asarray(trace.grad_norm)
    hit = np.nonzero(g <= cfg.start_grad)[0]
    n0 = int(hit[0]) if len(hit) else len(g) // 2
    # a single-iterate tail has zero drift everywhere
    return max(0, min(n0, len(g) - cfg.min_tail))


def divergence_statistics(trace, mu, nu, cfg=None):
    """Matrix of tail drifts of normalized potentials, shape (n_mu, n_nu).

    Source atoms removed by the solver's boundary split get +inf everywhere
    except at their own target atom.
    """
    cfg = cfg or DivergenceConfig()
    if trace.status != "trivial" and (trace.iterations < cfg.min_iters or not trace.potentials):
        raise NonConvergence("trace too short for the divergence diagnostic",
                             {"iterations": trace.iterations, "min_iters": cfg.min_iters})
    stat = np.full((len(mu), len(nu)), np.inf)
    for i, j, _ in trace.delta_pairs:
        stat[i, j] = 0.0
    ki, kj = trace.mu_index, trace.nu_index
    atoms = nu.atoms[kj]
    n0 = _tail_start(trace, cfg)
    tail = trace.potentials[n0:]
    for i in ki:
        ref = None
        drift = np.zeros(len(kj))
        for n, vals in enumerate(tail):
            eps = cfg.eps0 / (n0 + n + 1)
            q = normalize_at(PwaPotential(atoms, vals), mu.atoms[i], eps).values
            if ref is None:
                ref = q
            drift = np.maximum(drift, np.abs(q - ref))
        stat[i, kj] = drift
    return stat


def pave_dual_divergence(trace, mu, nu, threshold_cfg=None):
    """Paving from boundedness of normalized dual iterates.

    Target atom y_j is put into I^b(x_i) when the normalized potentials stay
    within the drift threshold at y_j; the cell of x_i is the relative
    interior of the hull of those atoms, merged as in :func:`pave_lp`.
    """
    cfg = threshold_cfg or DivergenceConfig()
    stat = divergence_statistics(trace, mu, nu, cfg)
    M = cfg.threshold
    groups = []
    for i in range(len(mu)):
        inside = np.nonzero(stat[i] <= M)[0]
        if len(inside) == 0:
            raise NonConvergence("no bounded target atom for a source atom", {"index": int(i)})
        groups.append(([i], list(inside)))
    res = PavingResult(_components(mu, _merge_groups(mu, nu, groups)), "dual-divergence", mu, nu)
    res.stats = {"drift": stat, "threshold": M, "tail_start": _tail_start(trace, cfg)}
    return res


def _polish(mu, nu, blocks):
    """Smallest mass-weighted correction making the blocks an exact transport.

    ``blocks`` is a list of (rows, cols, mass) with disjoint rows. Solves
    min sum d^2 / w subject to the marginal and barycenter equations, so
    every entry moves in proportion to its mass and stays nonnegative for
    small residuals.
    """
    n, m, d = len(mu), len(nu), mu.dim
    entries = []
    for rows, cols, mass in blocks:
        r, c = np.nonzero(mass > 0)
        entries.append((rows[r], cols[c], mass[r, c]))
    I = np.concatenate([e[0] for e in entries])
    J = np.concatenate([e[1] for e in entries])
    w = np.concatenate([e[2] for e in entries])
    A = np.zeros((n + m + d * n, len(w)))
    A[I, np.arange(len(w))] = 1.0
    A[n + J, np.arange(len(w))] = 1.0
    for c in range(d):
        A[n + m + d * I + c, np.arange(len(w))] = nu.atoms[J, c] - mu.atoms[I, c]
    target = np.concatenate([mu.weights, nu.weights, np.zeros(d * n)])
    resid = target - A @ w
    AW = A * w
    lam = np.linalg.lstsq(AW @ A.T, resid, rcond=None)[0]
    new = w + AW.T @ lam
    if new.min() < 0:
        new = np.maximum(new, 0.0)
    mass = np.zeros((n, m))
    mass[I, J] = new
    return mass


def disintegrate(p, pi, leak_tol=LEAK_TOL):
    """Split mu and nu along the paving using the coupling pi.

    Raises
    ------
    CrossLeak
        If pi moves more than ``leak_tol`` mass between components.
    """
    mu, nu = p.mu, p.nu
    M = pi.mass
    leak = 0.0
    blocks = []
    for comp in p.components:
        rows = np.asarray(comp.mu_indices)
        cols = np.asarray(comp.nu_indices)
        sub = M[np.ix_(rows, cols)]
        leak += float(M[rows].sum() - sub.sum())
        blocks.append((rows, cols, sub))
    if leak > leak_tol:
        raise CrossLeak(f"coupling moves {leak:.3g} mass across components (limit {leak_tol:g})")
    mass = _polish(mu, nu, blocks)
    comps = []
    for comp in p.components:
        rows = np.asarray(comp.mu_indices)
        kappa = float(mu.weights[rows].sum())
        col = mass[rows].sum(0)
        keep = np.nonzero(col > 0)[0]
        mu_loc = DiscreteMeasure.trusted(mu.atoms[rows], mu.weights[rows] / kappa)
        nu_loc = DiscreteMeasure.trusted(nu.atoms[keep], col[keep] / col[keep].sum())
        comps.append(replace(comp, kappa_weight=kappa, mu_local=mu_loc, nu_local=nu_loc,
                             nu_local_indices=keep))
    out = replace(p, components=comps)
    out.stats = {**p.stats, "leak": leak, "coupling": Coupling(mass)}
    return out


def reconstruction_error(p):
    """(mu error, nu error) of sum_comp kappa * local measures, in sup norm."""
    mu_rec = np.zeros(len(p.mu))
    nu_rec = np.zeros(len(p.nu))
    for c in p.components:
        mu_rec[c.mu_indices] += c.kappa_weight * c.mu_local.weights
        nu_rec[c.nu_local_indices] += c.kappa_weight * c.nu_local.weights
    return float(np.abs(mu_rec - p.mu.weights).max()), float(np.abs(nu_rec - p.nu.weights).max())


@dataclass
class DecomposeConfig:
    """Settings for :func:`decompose`.

    ``gap_tol`` bounds each component's duality gap (plus three Monte Carlo
    standard errors in the plane). ``require_agreement`` turns a mismatch
    between the LP and dual-divergence pavings into an error.
    """

    solve: SolveConfig = field(default_factory=SolveConfig)
    divergence: DivergenceConfig = field(default_factory=DivergenceConfig)
    gap_tol: float = 1e-6
    require_agreement: bool = True
    check_irreducible: bool = True


def _fit_component(comp, cfg, solved=None):
    mu_l, nu_l = comp.mu_local, comp.nu_local
    if len(nu_l) == 1:
        # a single target atom: the martingale is constant
        comp.bass = BassModel(PwaPotential(nu_l.atoms, np.zeros(1)),
                              DiscreteMeasure.dirac(np.zeros(nu_l.dim)))
        comp.primal_value = comp.dual_value = comp.gap = 0.0
        comp.irreducible = True
        return comp
    trace, st = solved if solved is not None else solve_dual(mu_l, nu_l, cfg.solve)
    if not trace.converged:
        raise NonConvergence("component dual did not converge",
                             {"grad_norm": trace.grad_norm[-1], "status": trace.status})
    tol = cfg.gap_tol + (0.0 if st.exact else 3.0 * (st.stderr + st.primal_stderr))
    if abs(st.gap) > tol:
        raise NonConvergence("component duality gap above tolerance", {"gap": st.gap, "tol": tol})
    comp.bass = BassModel(st.psi, DiscreteMeasure.trusted(st.bass_points, mu_l.weights))
    comp.primal_value, comp.dual_value, comp.gap = st.primal_value, st.dual_value, st.gap
    if cfg.check_irreducible:
        comp.irreducible = bool(MtPolytope(mu_l, nu_l).reachability().all())
    return comp


def decompose(mu, nu, config=None):
    """Full pipeline: dual solve, pavings, disintegration and Bass fits.

    Returns
    -------
    PavingResult
        The LP paving with local measures and a fitted :class:`BassModel`
        per component. ``agreement_report`` compares it with the
        dual-divergence paving (and the potential paving in 1D);
        ``stats`` carries the global trace and state.
    """
    cfg = config or DecomposeConfig()
    mt = MtPolytope(mu, nu)
    feas = mt.feasible()
    if not feas:
        raise InfeasibleError("pair is not in convex order", feas.witness)
    trace, state = solve_dual(mu, nu, cfg.solve)
    if not trace.converged:
        raise NonConvergence("dual solver did not converge",
                             {"grad_norm": trace.grad_norm[-1], "status": trace.status})
    lp = pave_lp(mu, nu, mt)
    dd = pave_dual_divergence(trace, mu, nu, cfg.divergence)
    report = {"lp_vs_dual_divergence": compare_partitions(lp, dd)}
    if mu.dim == 1:
        report["lp_vs_potential_1d"] = compare_partitions(lp, pave_potential_1d(mu, nu))
    if cfg.require_agreement and not all(r["agree"] for r in report.values()):
        raise PavingDisagreement(f"paving routes disagree: {report}")
    out = disintegrate(lp, state.induced)
    c0 = out.components[0]
    whole = (len(out.components) == 1 and np.array_equal(c0.mu_indices, np.arange(len(mu)))
             and np.array_equal(c0.nu_local_indices, np.arange(len(nu))))
    for comp in out.components:
        # an irreducible pair is its own component: the global solve is the fit
        _fit_component(comp, cfg, (trace, state) if whole else None)
    out.agreement_report = report
    out.stats.update({"trace": trace, "state": state, "divergence": dd.stats})
    return out
