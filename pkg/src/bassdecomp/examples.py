"""Builders for the worked examples and for random test instances.

``ex61`` is the pair mu = (delta_{-1} + delta_1)/2 and
nu = (nu_- + nu_+)/2 where nu_+ is the law of exp(Z - 1/2) and nu_- its
mirror image. ``circles`` is mu uniform on the unit circle and
nu = (uniform on the circle of radius 1/2 + uniform on radius R)/2.
"""

import numpy as np
from scipy.stats import rice

from .measures import DiscreteMeasure, mixture, quantile_discretize


def psi_plus(y):
    """y (log y - 1/2), the optimal dual potential of the positive component."""
    y = np.asarray(y, dtype=float)
    return y * (np.log(y) - 0.5)


def ex61(n=200, scheme="moment"):
    """Discretized (mu, nu) together with the two component targets."""
    nm = quantile_discretize("lognormal_minus", n, scheme=scheme)
    npl = quantile_discretize("lognormal_plus", n, scheme=scheme)
    mu = DiscreteMeasure([-1.0, 1.0], [0.5, 0.5])
    return mu, mixture([nm, npl], [0.5, 0.5]), nm, npl


def circles(n=24, R=1.5, offset=0.0):
    """mu on the unit circle and nu^(R), with all three circles at equal angles."""
    mu = quantile_discretize("circle", n, offset=offset)
    inner = quantile_discretize("circle", n, radius=0.5, offset=offset)
    outer = quantile_discretize("circle", n, radius=R, offset=offset)
    return mu, mixture([inner, outer], [0.5, 0.5])


def kink(rho):
    """k(rho): median of the radial law of alpha^(rho) * gamma.

    The radial law of a uniform point on the circle of radius rho plus a
    standard planar Gaussian is the Rice law with parameters (rho, 1).
    """
    return float(rice.median(rho))


def barycenter_gap(rho, R, samples=100_000, seed=0):
    """E[grad v(rho e + Z)] . e - 1 for the radial map with kink k(rho).

    grad v(x) = g(|x|) x/|x| with g = 1/2 inside the kink and R outside.
    The Bass condition M_0 = (grad v * gamma)(B_0) with B_0 = rho e asks for
    this to vanish. Antithetic normals keep the estimate smooth in R.
    """
    k = kink(rho)
    rng = np.random.default_rng([seed, 0x52])
    Z = rng.standard_normal((samples // 2, 2))
    Z = np.vstack([Z, -Z])
    W = Z + np.array([rho, 0.0])
    r = np.linalg.norm(W, axis=1)
    cos = W[:, 0] / r
    inner = r < k
    a = 0.5 * np.mean(cos * inner)
    b = np.mean(cos * ~inner)
    return a + R * b - 1.0, (a, b)


def radius_for(rho, samples=100_000, seed=0, lo=1.0, hi=20.0, tol=1e-10):
    """R(rho) by bisection on the barycenter condition."""
    f = lambda R: barycenter_gap(rho, R, samples, seed)[0]
    flo, fhi = f(lo), f(hi)
    if not flo < 0 < fhi:
        raise ValueError("bisection bracket does not straddle the root")
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def random_split_pair(rng, n_mu=4, max_nu=10, grid=None, keep_prob=0.0):
    """Random 1D pair in convex order built by martingale splitting.

    Each source atom x is split into two or three target atoms with
    barycenter x, so the pair is in convex order by construction and x lies
    strictly inside the hull of its own pieces. With probability
    ``keep_prob`` an atom is left unsplit. ``grid`` rounds atom positions so
    that pieces of different atoms can coincide.
    """
    k = int(rng.integers(1, n_mu + 1))
    x = rng.uniform(-3, 3, size=k)
    if grid:
        x = np.round(x / grid) * grid
    wmu = rng.dirichlet(np.ones(k))
    atoms, weights = [], []
    budget = max_nu
    for i in range(k):
        left = k - i - 1
        room = budget - left
        if room < 2 or rng.random() < keep_prob:
            pieces = [(x[i], 1.0)]
        else:
            pieces = _split(rng, x[i], 3 if room >= 3 and rng.random() < 0.4 else 2, grid)
        budget -= len(pieces)
        for y, w in pieces:
            atoms.append(y)
            weights.append(wmu[i] * w)
    mu = DiscreteMeasure(x, wmu)
    nu = DiscreteMeasure(np.array(atoms), np.array(weights))
    return mu, nu


def _split(rng, x, parts, grid):
    step = grid or 0.0
    lo = x - rng.uniform(0.2, 2.0)
    hi = x + rng.uniform(0.2, 2.0)
    if grid:
        lo = np.floor(lo / grid) * grid
        hi = np.ceil(hi / grid) * grid
        lo = min(lo, x - step)
        hi = max(hi, x + step)
    if parts == 2:
        p = (hi - x) / (hi - lo)
        return [(lo, p), (hi, 1 - p)]
    mid = rng.uniform(lo, hi)
    if grid:
        mid = np.round(mid / grid) * grid
    wm = rng.uniform(0.1, 0.5)
    # remaining mass carries barycenter xr, split between lo and hi
    xr = (x - wm * mid) / (1 - wm)
    if not lo < xr < hi:
        p = (hi - x) / (hi - lo)
        return [(lo, p), (hi, 1 - p)]
    p = (hi - xr) / (hi - lo)
    return [(lo, (1 - wm) * p), (mid, wm), (hi, (1 - wm) * (1 - p))]
