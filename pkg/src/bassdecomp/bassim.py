"""Simulation and statistical checks of Bass martingales.

A Bass model is a convex potential psi on target atoms, with v = psi^*
max-affine, and a Bass measure alpha. The martingale is

    M_t = (grad v * gamma^{1-t})(B_t),   B_0 ~ alpha,

driven by a standard Brownian motion B. At t = 1 it is the atom whose
Laguerre cell contains B_1.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import chi2

from . import _jsonio
from .convexfn import MCConfig, PwaPotential, Smoother, lower_convex_envelope
from .measures import DiscreteMeasure

FAMILY_LEVEL = 0.0027  # two-sided 3 sigma


@dataclass
class BassModel:
    """Potential on the target atoms plus the Bass measure."""

    v_potential: PwaPotential
    alpha: DiscreteMeasure

    @property
    def dim(self):
        return self.v_potential.dim

    @property
    def atoms(self):
        return self.v_potential.atoms

    def smoother(self, variance, mc=None):
        return Smoother(lower_convex_envelope(self.v_potential), variance, mc)

    def terminal_index(self, B):
        """Index of the atom attaining max_j <b, y_j> - psi_j (smallest on ties)."""
        scores = np.asarray(B) @ self.atoms.T - self.v_potential.values
        return np.argmax(scores, axis=1)

    def initial_points(self, mc=None):
        """(grad v * gamma)(alpha atoms); should reproduce the source atoms."""
        if len(self.atoms) == 1:
            return np.repeat(self.atoms, len(self.alpha), axis=0)
        return self.smoother(1.0, mc).evaluate(self.alpha.atoms, ("grad",))["grad"]

    def to_json(self):
        return {"atoms": self.atoms.tolist(), "psi": self.v_potential.values.tolist(),
                "alpha": self.alpha.to_json()}

    @classmethod
    def from_json(cls, obj):
        atoms = np.asarray(obj["atoms"], dtype=float)
        return cls(PwaPotential(atoms, np.asarray(obj["psi"], dtype=float)),
                   DiscreteMeasure.from_json(obj["alpha"]))


@dataclass
class PathBundle:
    """Simulated paths of B and M on a common time grid.

    ``states`` and ``brownian`` have shape (paths, K + 1, d). ``start`` and
    ``terminal`` hold the alpha-atom and target-atom index of every path.
    ``trace_estimates`` are left-point Riemann sums of tr Hess(v * gamma^{1-t})
    along B. ``terminal_var[:, k]`` is the model's conditional variance of
    each coordinate of M_1 given B at time k, shape (paths, K, d).
    """

    times: np.ndarray
    states: np.ndarray
    brownian: np.ndarray
    trace_estimates: np.ndarray
    start: np.ndarray
    terminal: np.ndarray
    terminal_var: np.ndarray = None

    @property
    def n_paths(self):
        return self.states.shape[0]

    def to_csv(self, path, max_paths=None):
        k = self.n_paths if max_paths is None else min(max_paths, self.n_paths)
        d = self.states.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "path"] + [f"m{c}" for c in range(d)])
            for p in range(k):
                for t, row in zip(self.times, self.states[p]):
                    w.writerow([repr(float(t)), p] + [repr(float(x)) for x in row])

    def summary(self):
        return {"paths": int(self.n_paths), "steps": int(len(self.times) - 1),
                "trace_mean": float(self.trace_estimates.mean()),
                "trace_stderr": float(self.trace_estimates.std(ddof=1) / np.sqrt(self.n_paths))
                if self.n_paths > 1 else 0.0}


def uniform_grid(K=64):
    return np.linspace(0.0, 1.0, K + 1)


def simulate(model, n_paths, time_grid=None, seed=0, mc=None):
    """Sample paths of the Bass martingale.

    Parameters
    ----------
    model : BassModel
    n_paths : int
    time_grid : array_like, optional
        Increasing times from 0 to 1; default 64 uniform steps.
    seed : int
    mc : MCConfig, optional
        Frames of the planar smoother.
    """
    times = uniform_grid() if time_grid is None else np.asarray(time_grid, dtype=float)
    if times[0] != 0.0 or times[-1] != 1.0 or np.any(np.diff(times) <= 0):
        raise ValueError("time grid must increase from 0 to 1")
    rng = np.random.default_rng([seed, 0x626D])
    d = model.dim
    K = len(times) - 1
    start = rng.choice(len(model.alpha), size=n_paths, p=model.alpha.weights)
    B = np.empty((n_paths, K + 1, d))
    B[:, 0] = model.alpha.atoms[start]
    steps = rng.standard_normal((n_paths, K, d)) * np.sqrt(np.diff(times))[None, :, None]
    B[:, 1:] = B[:, :1] + np.cumsum(steps, axis=1)
    M = np.empty_like(B)
    trace = np.zeros(n_paths)
    tvar = np.zeros((n_paths, K, d))
    terminal = model.terminal_index(B[:, -1])
    M[:, -1] = model.atoms[terminal]
    single = len(model.atoms) == 1
    for k in range(K):
        if single:
            M[:, k] = model.atoms[0]
            continue
        sm = model.smoother(1.0 - times[k], mc)
        grad, hess, second = sm.moments(B[:, k])
        M[:, k] = grad
        tvar[:, k] = np.maximum(second - grad ** 2, 0.0)
        tr = hess if hess.ndim == 1 else np.trace(hess, axis1=1, axis2=2)
        trace += (times[k + 1] - times[k]) * tr
    return PathBundle(times, M, B, trace, start, terminal, tvar)


def _family_z(n_tests):
    return float(max(3.0, ndtri(1.0 - FAMILY_LEVEL / (2.0 * max(n_tests, 1)))))


def _binned_means(x, incr, n_bins, var=None):
    """Per-bin count, mean and standard error of incr, binning on x quantiles.

    ``var`` holds per-path unbiased estimates of the conditional variance
    of incr under the model. When given, the standard error is the larger
    of the empirical one and the model one. Late in the run increments are
    skewed (rare jumps between atoms), and a bin that sees no jump has an
    empirical standard error far below the true one.
    """
    edges = np.unique(np.quantile(x, np.linspace(0, 1, n_bins + 1)[1:-1]))
    which = np.searchsorted(edges, x, side="right")
    out = []
    for b in range(len(edges) + 1):
        sel = which == b
        cnt = int(sel.sum())
        if cnt == 0:
            continue
        v = incr[sel]
        mean = v.mean(axis=0)
        se = v.std(axis=0, ddof=1) / np.sqrt(cnt) if cnt > 1 else np.full(v.shape[1], np.inf)
        if var is not None:
            se = np.maximum(se, np.sqrt(np.maximum(var[sel].sum(axis=0), 0.0)) / cnt)
        out.append((b, cnt, mean, se))
    return out


def _z(mean, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(se > 0, np.abs(mean) / se, np.where(np.abs(mean) > 1e-12, np.inf, 0.0))


def verify_martingale(pb, n_bins=10, min_per_bin=30):
    """Binned regression tests of the martingale property.

    For each adjacent pair of grid times the states at the earlier time are
    cut into quantile bins along every coordinate, and the mean increment in
    each bin is compared with its standard error. The tower version does
    the same with M_1 - M_t. The model's conditional variances floor the
    standard errors: Var(M_1 | B_t) for the tower test, and for a step
    Var(M_1 | B_t) - Var(M_1 | B_t'), whose conditional mean is the
    variance of M_t' - M_t. Individual z-scores are judged at the 3 sigma level with a
    Bonferroni correction over all tests run.
    """
    if len(pb.times) < 2:
        raise ValueError("need at least two time points")
    S = pb.states
    K = len(pb.times) - 1
    d = S.shape[2]
    rows = []
    inconclusive = False
    for kind in ("step", "tower"):
        for k in range(K):
            incr = (S[:, k + 1] if kind == "step" else S[:, -1]) - S[:, k]
            var = None
            if pb.terminal_var is not None:
                var = pb.terminal_var[:, k]
                if kind == "step" and k < K - 1:
                    var = var - pb.terminal_var[:, k + 1]
            for c in range(d):
                for b, cnt, mean, se in _binned_means(S[:, k, c], incr, n_bins, var):
                    if cnt < min_per_bin:
                        inconclusive = True
                        continue
                    rows.append((kind, k, c, b, cnt, mean, se, _z(mean, se)))
    n_tests = sum(len(r[7]) for r in rows)
    zc = _family_z(n_tests)
    zmax = max((float(r[7].max()) for r in rows), default=0.0)
    table = [{"kind": r[0], "step": r[1], "coord": r[2], "bin": r[3], "count": r[4],
              "mean": r[5].tolist(), "stderr": r[6].tolist(), "z": r[7].tolist()} for r in rows]
    return {"passed": bool(zmax <= zc), "z_max": zmax, "z_critical": zc, "tests": n_tests,
            "count_above_3sigma": int(sum((r[7] > 3).sum() for r in rows)),
            "inconclusive": inconclusive, "table": table}


def verify_value(pb, expected_P, grid_bias=2e-2, min_steps=16):
    """Mean trace functional against the expected optimal value."""
    K = len(pb.times) - 1
    if K < min_steps:
        raise ValueError(f"time grid too coarse: {K} < {min_steps} steps")
    mean = float(pb.trace_estimates.mean())
    se = float(pb.trace_estimates.std(ddof=1) / np.sqrt(pb.n_paths)) if pb.n_paths > 1 else 0.0
    tol = 3 * se + grid_bias
    return {"passed": bool(abs(mean - expected_P) <= tol), "mean": mean, "stderr": se,
            "expected": float(expected_P), "tol": tol}


def verify_marginals(pb, model, mu_local, nu_local, mc=None, start_tol=1e-6):
    """Initial law against mu and terminal law against nu.

    M_0 of each path must be within ``start_tol`` of its source atom (three
    Monte Carlo standard errors in the plane). The terminal counts go
    through a multinomial chi-square test at the 3 sigma level.
    """
    init = model.initial_points(mc)
    dev = float(np.linalg.norm(pb.states[:, 0] - init[pb.start], axis=1).max()) if pb.n_paths else 0.0
    mu_dev = float(np.linalg.norm(init - mu_local.atoms, axis=1).max())
    # terminal atoms
    counts = np.bincount(pb.terminal, minlength=len(model.atoms)).astype(float)
    expected = np.zeros(len(model.atoms))
    for y, w in zip(nu_local.atoms, nu_local.weights):
        j = int(np.argmin(np.linalg.norm(model.atoms - y, axis=1)))
        expected[j] += w
    expected *= pb.n_paths
    live = expected > 0
    stray = float(counts[~live].sum())
    stat = float(((counts[live] - expected[live]) ** 2 / expected[live]).sum())
    dof = max(int(live.sum()) - 1, 1)
    pval = float(chi2.sf(stat, dof))
    ok_start = dev <= 1e-9 and mu_dev <= start_tol
    return {"passed": bool(ok_start and stray == 0 and pval >= FAMILY_LEVEL),
            "start_deviation": mu_dev, "chi2": stat, "dof": dof, "p_value": pval,
            "stray_terminal": stray}


def energy_distance(x, y):
    """Energy distance between two samples (rows are points)."""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)

    def mean_dist(a, b):
        return float(np.linalg.norm(a[:, None] - b[None], axis=-1).mean())

    return 2 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)


def energy_test(x, y, n_perm=200, seed=0, max_points=1500):
    """Permutation two-sample energy test; passes when p >= 3 sigma level."""
    rng = np.random.default_rng([seed, 0x6574])
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    if len(x) > max_points:
        x = x[rng.choice(len(x), max_points, replace=False)]
    if len(y) > max_points:
        y = y[rng.choice(len(y), max_points, replace=False)]
    z = np.vstack([x, y])
    D = np.linalg.norm(z[:, None] - z[None], axis=-1)
    n = len(x)

    def stat(idx):
        a, b = idx[:n], idx[n:]
        return 2 * D[np.ix_(a, b)].mean() - D[np.ix_(a, a)].mean() - D[np.ix_(b, b)].mean()

    base = np.arange(len(z))
    obs = stat(base)
    null = np.array([stat(rng.permutation(base)) for _ in range(n_perm)])
    p = (1 + (null >= obs).sum()) / (n_perm + 1)
    # with few permutations the smallest attainable p is 1/(n_perm+1)
    level = max(FAMILY_LEVEL, 1.0 / (n_perm + 1))
    return {"passed": bool(p > level), "statistic": float(obs), "p_value": float(p),
            "threshold": float(np.quantile(null, 1 - FAMILY_LEVEL))}


def pushforward_sample(model, t, n, seed=0, mc=None):
    """Direct sample of Law(M_t): alpha * gamma^t pushed by grad v * gamma^{1-t}."""
    rng = np.random.default_rng([seed, 0x7066])
    idx = rng.choice(len(model.alpha), size=n, p=model.alpha.weights)
    B = model.alpha.atoms[idx] + np.sqrt(t) * rng.standard_normal((n, model.dim))
    if t >= 1.0:
        return model.atoms[model.terminal_index(B)]
    if len(model.atoms) == 1:
        return np.repeat(model.atoms, n, axis=0)
    return model.smoother(1.0 - t, mc).evaluate(B, ("grad",))["grad"]


def summary_json(pb, reports):
    return _jsonio.dumps({"bundle": pb.summary(), "reports": reports})
