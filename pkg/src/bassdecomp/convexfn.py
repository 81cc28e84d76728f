"""Piecewise-affine convex potentials and their Gaussian smoothings.

A potential psi is stored by its values on finitely many atoms y_j. Its
conjugate is the max-affine function ``v(b) = max_j <b, y_j> - psi_j`` and the
smoothed function is ``f = v * gamma^s``, i.e. ``f(b) = E v(b + sqrt(s) Z)``.

In one dimension (and for atoms on a common line in the plane) ``f`` and its
derivatives have closed forms in terms of the normal cdf and density. In the
plane we use a conditional Monte Carlo estimator: for each sample a random
direction ``u`` and an independent normal offset along ``u_perp`` are drawn and
the remaining coordinate along ``u`` is integrated exactly. The resulting
estimator is a smooth deterministic function of ``b`` once the seed is fixed,
so Newton iterations and line searches can be run on it.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy.spatial import ConvexHull
from scipy.special import ndtr

from . import _kernels
from .errors import BoundaryAtom, NonConvergence
from .measures import DiscreteMeasure

_SQRT2PI = np.sqrt(2 * np.pi)
ENVELOPE_TOL = 1e-10


def _npdf(x):
    return np.exp(-0.5 * x * x) / _SQRT2PI


def _interval_mass(lo, hi):
    """P(lo < Z < hi), accurate in both tails."""
    with np.errstate(invalid="ignore"):
        upper = ndtr(-lo) - ndtr(-hi)
        lower = ndtr(hi) - ndtr(lo)
    out = np.where(lo > 0, upper, lower)
    return np.where(hi > lo, np.maximum(out, 0.0), 0.0)


@dataclass(frozen=True)
class MCConfig:
    """Sample count and seed for the planar smoothing estimator.

    ``samples`` is rounded up to an even number; samples come in antithetic
    pairs sharing a direction.
    """

    samples: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("need at least two Monte Carlo samples")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def frames(self):
        return _frames(self.samples, self.seed)


@lru_cache(maxsize=32)
def _frames(samples, seed):
    half = (samples + 1) // 2
    rng = np.random.default_rng(seed)
    theta = np.pi * (np.arange(half) + rng.random(half)) / half
    s = rng.standard_normal(half)
    theta = np.repeat(theta, 2)
    s = np.stack([s, -s], axis=1).ravel()
    u = np.column_stack([np.cos(theta), np.sin(theta)])
    uperp = np.column_stack([-u[:, 1], u[:, 0]])
    for a in (u, uperp, s):
        a.setflags(write=False)
    return u, uperp, s


@dataclass(frozen=True)
class SmoothingKernel:
    """Centered Gaussian kernel with covariance ``variance * I``."""

    variance: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if not (self.variance > 0 and np.isfinite(self.variance)):
            raise ValueError("kernel variance must be positive and finite")
        if self.dim not in (1, 2):
            raise ValueError("kernel dim must be 1 or 2")

    @property
    def sd(self):
        return float(np.sqrt(self.variance))


class Estimate(NamedTuple):
    value: float
    stderr: float


def _affine_frame(y, tol=1e-12):
    """Affine hull of the rows of y: (origin, orthonormal basis rows)."""
    p0 = y[0]
    d = y - p0
    scale = max(np.abs(d).max(), 1.0)
    if len(y) == 1:
        return p0, np.zeros((0, y.shape[1]))
    _, sv, vt = np.linalg.svd(d, full_matrices=False)
    rank = int((sv > tol * scale * np.sqrt(len(y))).sum())
    return p0, vt[:rank]


def _lower_chain(t, w):
    """Indices (into the sorted order) of lower-hull vertices of (t, w)."""
    hull = []
    for k in range(len(t)):
        while len(hull) >= 2:
            o, a = hull[-2], hull[-1]
            cross = (t[a] - t[o]) * (w[k] - w[o]) - (w[a] - w[o]) * (t[k] - t[o])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(k)
    return hull


class _Envelope:
    """Structure of the lower convex envelope of a potential.

    ``kind`` is ``"point"``, ``"line"`` (atoms on a line, or dim 1) or
    ``"plane"``. Line envelopes carry the parametrization y = p0 + tau * U and
    the sorted vertex list; plane envelopes carry the lower facets.
    """

    def __init__(self, atoms, values):
        n, d = atoms.shape
        p0, basis = _affine_frame(atoms)
        self.dim = d
        self.origin = p0
        if len(basis) == 0:
            self.kind = "point"
            self.vertices = np.array([int(np.argmin(values))])
            self.env = np.full(n, values.min())
            return
        if len(basis) == 1:
            self.kind = "line"
            u = basis[0]
            if d == 1:
                u = np.array([1.0])
                p0 = np.zeros(1)
                self.origin = p0
            elif u[np.argmax(np.abs(u))] < 0:
                u = -u
            self.direction = u
            tau = (atoms - p0) @ u
            order = np.argsort(tau, kind="stable")
            ts, ws = tau[order], values[order]
            chain = _lower_chain(ts, ws)
            vert = order[chain]
            self.vertices = vert
            self.tau = tau
            self.vtau = ts[chain]
            self.vval = ws[chain]
            env = np.interp(tau, self.vtau, self.vval)
            env = np.minimum(env, values)
            env[vert] = values[vert]
            self.env = env
            self.slopes = np.diff(self.vval) / np.diff(self.vtau)
            return
        self.kind = "plane"
        lo, hi = values.min(), values.max()
        span = np.ptp(atoms, axis=0).max()
        top = np.append(atoms.mean(axis=0), hi + (hi - lo) + span + 1.0)
        pts = np.vstack([np.column_stack([atoms, values]), top])
        hull = ConvexHull(pts)
        eq = hull.equations
        lower = eq[:, 2] < -1e-12
        simp = hull.simplices[lower]
        nz = eq[lower, 2]
        grads = -eq[lower, :2] / nz[:, None]
        offs = -eq[lower, 3] / nz
        self.facets = simp
        self.facet_grad = grads
        self.facet_off = offs
        vert = np.unique(simp)
        vert = vert[vert < n]
        self.vertices = vert
        env = (atoms @ grads.T + offs).max(axis=1)
        env = np.minimum(env, values)
        env[vert] = values[vert]
        self.env = env
        self.atoms = atoms


class PwaPotential:
    """Convex potential given by values on atoms.

    Parameters
    ----------
    support : DiscreteMeasure or array_like, shape (n,) or (n, d)
        The atoms y_j.
    values : array_like, shape (n,)
        psi_j.
    on_envelope : bool
        Assert that the values already lie on their lower convex envelope.
        Checked at construction within ``1e-10``.
    """

    def __init__(self, support, values, on_envelope=False, *, _checked=False):
        atoms = support.atoms if isinstance(support, DiscreteMeasure) else np.asarray(support, float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        vals = np.array(values, dtype=float).ravel()
        if len(vals) != len(atoms):
            raise ValueError(f"{len(atoms)} atoms but {len(vals)} values")
        if not np.all(np.isfinite(vals)):
            raise ValueError("potential values must be finite")
        atoms = np.ascontiguousarray(atoms)
        atoms.setflags(write=False)
        vals.setflags(write=False)
        self.atoms = atoms
        self.values = vals
        self.on_envelope = bool(on_envelope)
        self._env = None
        if on_envelope and not _checked:
            gap = np.abs(self.envelope_info().env - vals).max()
            if gap > ENVELOPE_TOL:
                raise ValueError(f"values lie {gap:.3g} above their lower convex envelope")

    @property
    def dim(self):
        return self.atoms.shape[1]

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        return f"PwaPotential(dim={self.dim}, n={len(self)}, on_envelope={self.on_envelope})"

    def envelope_info(self):
        if self._env is None:
            self._env = _Envelope(self.atoms, self.values)
        return self._env

    def with_values(self, values, on_envelope=False):
        return PwaPotential(self.atoms, values, on_envelope)

    def to_json(self):
        return {"values": self.values.tolist()}


def lower_convex_envelope(p):
    """Largest convex function below the given values, restricted to the atoms."""
    info = p.envelope_info()
    out = PwaPotential(p.atoms, info.env, on_envelope=True, _checked=True)
    out._env = info if np.array_equal(info.env, p.values) else None
    return out


def _require_envelope(p):
    if not p.on_envelope:
        raise ValueError("operation requires a potential on its lower convex envelope")


def conjugate_maxaffine(p, b):
    """Evaluate v(b) = max_j <b, y_j> - psi_j.

    Returns
    -------
    value : float or ndarray
    index : int or ndarray
        Smallest index attaining the maximum.
    """
    _require_envelope(p)
    b = np.asarray(b, dtype=float)
    single = b.ndim == 0 or (b.ndim == 1 and p.dim > 1 and b.shape[0] == p.dim)
    B = b.reshape(-1, p.dim)
    scores = B @ p.atoms.T - p.values
    idx = np.argmax(scores, axis=1)
    val = scores[np.arange(len(B)), idx]
    if single:
        return float(val[0]), int(idx[0])
    return val, idx


class Smoother:
    """Smoothed conjugate ``f = psi^* * gamma^s`` and its derivatives.

    All evaluation methods take points of shape (P, d) and are vectorized.

    Parameters
    ----------
    p : PwaPotential
        Must lie on its lower convex envelope.
    variance : float
        Kernel variance ``s``.
    mc : MCConfig, optional
        Used only when the potential's atoms span the plane.
    """

    def __init__(self, p, variance=1.0, mc=None):
        _require_envelope(p)
        info = p.envelope_info()
        self.n = len(p)
        self.dim = p.dim
        self.sd = float(np.sqrt(variance))
        self.kind = info.kind
        self.exact = info.kind != "plane"
        vert = np.asarray(info.vertices)
        self.vert = vert
        self.info = info
        if info.kind == "point":
            self.y0 = p.atoms[vert[0]]
            self.psi0 = p.values[vert[0]]
        elif info.kind == "line":
            self.origin = info.origin
            self.U = info.direction
            self.tau = info.vtau
            self.w = info.vval
            # breakpoints of w*(beta) = max_k beta tau_k - w_k
            self.c = info.slopes
        else:
            self.mc = mc or MCConfig()
            self.Y = p.atoms[vert]
            self.w = p.values[vert]
            u, up, s = self.mc.frames()
            self.u, self.up, self.s = u, up, s
            m = self.sd * (u @ self.Y.T)
            self.slope = m
            self.shift = self.sd * s[:, None] * (up @ self.Y.T) - self.w
            self.order = np.ascontiguousarray(np.argsort(m, axis=1, kind="stable"))
            self.slope = np.ascontiguousarray(self.slope)
            dm = m[:, :, None] - m[:, None, :]
            with np.errstate(divide="ignore"):
                self.inv_dm = np.where(dm != 0, 1.0 / np.where(dm != 0, dm, 1.0), 0.0)
        # hull data for interior tests
        self.hull_atoms = p.atoms[vert]

    # line mode helpers ------------------------------------------------
    def _line_cells(self, beta):
        c = self.c
        z = (c[None, :] - beta[:, None]) / self.sd
        inf = np.full((len(beta), 1), np.inf)
        lo = np.concatenate([-inf, z], axis=1)
        hi = np.concatenate([z, inf], axis=1)
        return lo, hi

    def _line_eval(self, beta, what):
        lo, hi = self._line_cells(beta)
        mass = _interval_mass(lo, hi)
        out = {}
        if "mass" in what:
            out["mass"] = mass
        if "value" in what:
            dens = _npdf(lo) - _npdf(hi)
            out["value"] = ((beta[:, None] * self.tau - self.w) * mass).sum(1) + self.sd * (dens * self.tau).sum(1)
        if "grad" in what:
            out["grad"] = mass @ self.tau
        if "hess" in what:
            if len(self.c):
                z = (beta[:, None] - self.c[None, :]) / self.sd
                out["hess"] = (_npdf(z) * np.diff(self.tau)).sum(1) / self.sd
            else:
                out["hess"] = np.zeros(len(beta))
        if "primal" in what:
            out["primal"] = ((_npdf(lo) - _npdf(hi)) * self.tau).sum(1)
        return out

    # plane mode --------------------------------------------------------
    def _upper_envelope(self, A):
        if _kernels.line_envelope is None:
            return self._upper_envelope_numpy(A)
        P, K, m = A.shape
        Ar = np.ascontiguousarray(A.reshape(P * K, m))
        L = np.empty_like(Ar)
        H = np.empty_like(Ar)
        il = np.empty(Ar.shape, np.int64)
        ih = np.empty(Ar.shape, np.int64)
        _kernels.line_envelope(Ar, self.slope, self.order, L, H, il, ih)
        shape = (P, K, m)
        return L.reshape(shape), H.reshape(shape), il.reshape(shape), ih.reshape(shape)

    def _upper_envelope_numpy(self, A):
        """Upper envelope of the lines t -> A_j + m_j t for every (point, sample).

        Lines are swept in increasing slope order (the convex hull trick),
        vectorized over all problems. Returns L, H (the t-interval where line
        j is on top, L = H = 0 for lines never on top) and the indices of the
        neighbouring envelope lines (a line's own index at the ends).
        """
        P, K, m = A.shape
        N = P * K
        A = A.reshape(N, m)
        order = np.broadcast_to(self.order[None], (P, K, m)).reshape(N, m)
        slope = np.broadcast_to(self.slope[None], (P, K, m)).reshape(N, m)
        Af = A.ravel()
        sf = slope.ravel()
        base = np.arange(N) * m
        stack = np.zeros(N * m, dtype=np.intp)
        size = np.zeros(N, dtype=np.intp)

        for step in range(m):
            new = order[:, step]
            nf = base + new
            keep = np.ones(N, dtype=bool)
            has = size >= 1
            top = base + stack[base + np.maximum(size - 1, 0)]
            same = has & (sf[top] == sf[nf])
            # equal slopes: the higher line survives, the earlier index on ties
            better = Af[nf] > Af[top]
            size -= same & better
            keep &= ~(same & ~better)
            idx = np.nonzero(keep & (size >= 2))[0]
            while len(idx):
                b = base[idx]
                sz = size[idx]
                t1 = b + stack[b + sz - 1]
                t0 = b + stack[b + sz - 2]
                t2 = nf[idx]
                # drop the top line when it is not above the other two anywhere
                lhs = (Af[t0] - Af[t1]) * (sf[t2] - sf[t1])
                rhs = (Af[t1] - Af[t2]) * (sf[t1] - sf[t0])
                pop = lhs >= rhs
                idx = idx[pop]
                size[idx] -= 1
                idx = idx[size[idx] >= 2]
            k = np.nonzero(keep)[0]
            stack[base[k] + size[k]] = new[k]
            size += keep
        stack = stack.reshape(N, m)
        L = np.zeros((N, m))
        H = np.zeros((N, m))
        il = np.tile(np.arange(m), (N, 1))
        ih = il.copy()
        pos = np.arange(m)[None, :]
        valid = pos < size[:, None]
        j = stack
        nxt = np.where(pos + 1 < size[:, None], np.roll(stack, -1, axis=1), stack)
        prv = np.where(pos >= 1, np.roll(stack, 1, axis=1), stack)
        with np.errstate(divide="ignore", invalid="ignore"):
            hi_t = np.where(pos + 1 < size[:, None], (np.take_along_axis(A, j, 1) - np.take_along_axis(A, nxt, 1))
                            / (np.take_along_axis(slope, nxt, 1) - np.take_along_axis(slope, j, 1)), np.inf)
            lo_t = np.where(pos >= 1, (np.take_along_axis(A, prv, 1) - np.take_along_axis(A, j, 1))
                            / (np.take_along_axis(slope, j, 1) - np.take_along_axis(slope, prv, 1)), -np.inf)
        r_, c_ = np.nonzero(valid)
        jj = j[r_, c_]
        L[r_, jj] = lo_t[r_, c_]
        H[r_, jj] = hi_t[r_, c_]
        il[r_, jj] = prv[r_, c_]
        ih[r_, jj] = nxt[r_, c_]
        shape = (P, K, m)
        return L.reshape(shape), H.reshape(shape), il.reshape(shape), ih.reshape(shape)

    def _inv_pairs(self, il, ih):
        """1 / (m_j - m_l) for the lower and upper envelope neighbours l."""
        K, m = self.slope.shape
        kk = np.arange(K)[None, :, None]
        jj = np.arange(m)[None, None, :]
        return self.inv_dm[kk, jj, il], self.inv_dm[kk, jj, ih]

    def _plane_chunk(self, B, what):
        A = (B @ self.Y.T)[:, None, :] + self.shift[None]  # P,K,m
        L, H, il, ih = self._upper_envelope(A)
        # only the few lines on each envelope carry mass
        on = np.nonzero(H > L)
        mass = np.zeros(L.shape)
        mass[on] = np.maximum(_interval_mass(L[on], H[on]), 0.0)
        alive = mass > 0
        phL = np.zeros(L.shape)
        phH = np.zeros(L.shape)
        phL[on] = _npdf(L[on])
        phH[on] = _npdf(H[on])
        phL[~alive] = 0.0
        phH[~alive] = 0.0
        out = {}
        if "mass" in what:
            out["mass"] = mass.mean(1)
        if "value" in what:
            per = (A * mass + self.slope[None] * (phL - phH)).sum(2)
            out["value_samples"] = per
        if "grad" in what:
            out["grad"] = mass.mean(1) @ self.Y
        if "hess" in what:
            # d R_jl / d b = (y_l - y_j) / (m_j - m_l)
            K = mass.shape[1]
            dLc, dHc = self._inv_pairs(il, ih)
            yl = self.Y[il] - self.Y[None, None]
            yh = self.Y[ih] - self.Y[None, None]
            dmass = (phH * dHc)[..., None] * yh - (phL * dLc)[..., None] * yl
            dmass = np.where(alive[..., None], dmass, 0.0)
            Hm = np.einsum("pkjc,jd->pcd", dmass, self.Y) / K
            out["hess"] = 0.5 * (Hm + Hm.transpose(0, 2, 1))
        if "primal" in what:
            mu_ = self.slope / self.sd
            mp = self.s[:, None] * (self.up @ self.Y.T)
            per = (mu_[None] * (phL - phH) + mp[None] * mass).sum(2)
            out["primal"] = per.mean(1)
            out["primal_samples"] = per
        return out

    def _plane_eval(self, B, what):
        m = len(self.vert)
        K = len(self.s)
        chunk = max(1, int(2e6 // (K * m)))
        parts = [self._plane_chunk(B[i:i + chunk], what) for i in range(0, len(B), chunk)]
        return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}

    # public evaluation ---------------------------------------------------
    def evaluate(self, B, what=("value", "grad", "mass")):
        """Evaluate requested quantities at points B (shape (P, d)).

        Keys: ``value`` (f), ``stderr`` (of the value), ``grad`` (nabla f),
        ``hess`` (nabla^2 f), ``mass`` (Laguerre masses over all atoms),
        ``primal`` (E <nabla v(b + sqrt(s) Z), Z>).
        """
        B = np.asarray(B, dtype=float).reshape(-1, self.dim)
        P = len(B)
        what = set(what)
        out = {}
        if self.kind == "point":
            if "value" in what:
                out["value"] = B @ self.y0 - self.psi0
                out["stderr"] = np.zeros(P)
            if "grad" in what:
                out["grad"] = np.tile(self.y0, (P, 1))
            if "hess" in what:
                out["hess"] = np.zeros((P, self.dim, self.dim))
            if "mass" in what:
                mass = np.zeros((P, self.n))
                mass[:, self.vert[0]] = 1.0
                out["mass"] = mass
            if "primal" in what:
                out["primal"] = np.zeros(P)
            return out
        if self.kind == "line":
            beta = B @ self.U
            base = B @ self.origin
            r = self._line_eval(beta, what)
            if "value" in what:
                out["value"] = base + r["value"]
                out["stderr"] = np.zeros(P)
            if "grad" in what:
                out["grad"] = self.origin + r["grad"][:, None] * self.U
            if "hess" in what:
                out["hess"] = r["hess"][:, None, None] * np.outer(self.U, self.U)
            if "primal" in what:
                out["primal"] = r["primal"]
        else:
            r = self._plane_eval(B, what)
            if "value" in what:
                vs = r["value_samples"]
                pairs = vs.reshape(P, -1, 2).mean(2)
                out["value"] = vs.mean(1)
                out["stderr"] = pairs.std(1, ddof=1) / np.sqrt(pairs.shape[1])
            for k in ("grad", "hess", "primal"):
                if k in what:
                    out[k] = r[k]
            if "primal" in what:
                ps = r["primal_samples"].reshape(P, -1, 2).mean(2)
                out["primal_stderr"] = ps.std(1, ddof=1) / np.sqrt(ps.shape[1])
        if "mass" in what:
            mass = np.zeros((P, self.n))
            mass[:, self.vert] = r["mass"]
            out["mass"] = mass
        return out

    def moments(self, B):
        """Gradient, Hessian and second moment of the smoothed cell law.

        The second moment is ``E[Y Y^T]`` for Y the atom whose Laguerre cell
        contains b + sqrt(s) Z, returned as its diagonal, shape (P, d). In
        the exact modes this avoids the full mass matrix.
        """
        B = np.asarray(B, dtype=float).reshape(-1, self.dim)
        P = len(B)
        if self.kind == "point":
            return (np.tile(self.y0, (P, 1)), np.zeros((P, self.dim, self.dim)),
                    np.tile(self.y0 ** 2, (P, 1)))
        if self.kind == "plane":
            r = self.evaluate(B, ("grad", "hess", "mass"))
            return r["grad"], r["hess"], r["mass"][:, self.vert] @ self.Y ** 2
        beta = np.ascontiguousarray(B @ self.U)
        m1 = np.empty(P)
        m2 = np.empty(P)
        h = np.empty(P)
        if _kernels.line_moments is not None and len(self.tau) > 1:
            _kernels.line_moments(beta, np.ascontiguousarray(self.c, dtype=float),
                                  np.ascontiguousarray(self.tau, dtype=float), self.sd, m1, m2, h)
        else:
            r = self._line_eval(beta, ("mass", "hess"))
            m1, m2, h = r["mass"] @ self.tau, r["mass"] @ self.tau ** 2, r["hess"]
        o, U = self.origin, self.U
        grad = o + m1[:, None] * U
        second = o ** 2 + 2 * m1[:, None] * (o * U) + m2[:, None] * U ** 2
        return grad, h[:, None, None] * np.outer(U, U), second

    # second derivatives in the intercepts ----------------------------------
    def intercept_jacobian(self, B):
        """d mass / d intercept for the active atoms at points B.

        With intercepts a_l = <b, y_l> - psi_l the Laguerre masses depend on
        psi and b only through a. The Jacobian is a symmetric weighted graph
        Laplacian over adjacent cells. Returns ``(J, coords)`` where ``J`` has
        shape (P, m, m) over ``self.vert`` and ``coords`` (m, q) are the
        derivatives of the intercepts in the reduced b coordinates.
        """
        B = np.asarray(B, dtype=float).reshape(-1, self.dim)
        P = len(B)
        if self.kind == "point":
            return np.zeros((P, 1, 1)), np.zeros((1, 1))
        if self.kind == "line":
            beta = B @ self.U
            m = len(self.tau)
            J = np.zeros((P, m, m))
            if m > 1:
                z = (self.c[None, :] - beta[:, None]) / self.sd
                wgt = _npdf(z) / (self.sd * np.diff(self.tau))
                k = np.arange(m - 1)
                J[:, k, k] += wgt
                J[:, k + 1, k + 1] += wgt
                J[:, k, k + 1] -= wgt
                J[:, k + 1, k] -= wgt
            return J, self.tau[:, None]
        m = len(self.vert)
        K = len(self.s)
        chunk = max(1, int(2e6 // (K * m)))
        out = np.zeros((P, m, m))
        for i0 in range(0, P, chunk):
            Bc = B[i0:i0 + chunk]
            A = (Bc @ self.Y.T)[:, None, :] + self.shift[None]
            L, H, il, ih = self._upper_envelope(A)
            alive = _interval_mass(L, H) > 0
            Pc = len(Bc)
            dLc, dHc = self._inv_pairs(il, ih)
            wU = np.where(alive, -_npdf(H) * dHc, 0.0)
            wL = np.where(alive, _npdf(L) * dLc, 0.0)
            wU = np.nan_to_num(wU) / K
            wL = np.nan_to_num(wL) / K
            Jc = np.zeros((Pc, m, m))
            pi = np.broadcast_to(np.arange(Pc)[:, None, None], (Pc, K, m))
            jj = np.broadcast_to(np.arange(m)[None, None, :], (Pc, K, m))
            np.add.at(Jc, (pi, jj, jj), wU + wL)
            np.add.at(Jc, (pi, jj, ih), -wU)
            np.add.at(Jc, (pi, jj, il), -wL)
            out[i0:i0 + chunk] = 0.5 * (Jc + Jc.transpose(0, 2, 1))
        return out, self.Y

    # interior tests ------------------------------------------------------
    def interior(self, X, rel_margin=1e-10):
        """Mask of points strictly inside the relative interior of the atom hull."""
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        if self.kind == "point":
            return np.linalg.norm(X - self.y0, axis=1) <= 1e-12 * max(1.0, np.abs(self.y0).max())
        if self.kind == "line":
            span = self.tau[-1] - self.tau[0]
            rel = X - self.origin
            t = rel @ self.U
            off = np.linalg.norm(rel - t[:, None] * self.U, axis=1)
            tol = rel_margin * span
            return (t > self.tau[0] + tol) & (t < self.tau[-1] - tol) & (off <= 1e-9 * span)
        hull = ConvexHull(self.hull_atoms)
        diam = np.ptp(self.hull_atoms, axis=0).max()
        d = X @ hull.equations[:, :2].T + hull.equations[:, 2]
        return d.max(axis=1) < -rel_margin * diam

    # conjugate ------------------------------------------------------------
    def conjugate(self, X, b0=None, tol=None, max_iter=200):
        """Solve sup_b <x, b> - f(b) for each row of X.

        Returns a dict with ``value``, ``point`` (maximizers b*), ``mass``
        (Laguerre masses at b*), ``primal`` and, in the plane, ``stderr``.

        Raises
        ------
        BoundaryAtom
            If some x is not in the open relative interior of the atom hull.
        """
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        inside = self.interior(X)
        if not inside.all():
            bad = np.nonzero(~inside)[0]
            raise BoundaryAtom(f"{len(bad)} point(s) outside the open hull of the atoms", bad)
        P = len(X)
        if self.kind == "point":
            B = np.zeros((P, self.dim))
        elif self.kind == "line":
            xi = (X - self.origin) @ self.U
            beta0 = None if b0 is None else np.asarray(b0, float).reshape(P, self.dim) @ self.U
            beta = self._solve_line(xi, beta0, tol, max_iter)
            B = beta[:, None] * self.U
        else:
            B = self._solve_plane(X, b0, tol or 1e-10, max_iter)
        r = self.evaluate(B, ("value", "mass", "primal", "grad"))
        val = (X * B).sum(1) - r["value"]
        out = {"value": val, "point": B, "mass": r["mass"], "primal": r["primal"],
               "residual": np.abs(X - r["grad"]).max(axis=1) if P else np.zeros(0)}
        out["stderr"] = r.get("stderr", np.zeros(P))
        if "primal_stderr" in r:
            out["primal_stderr"] = r["primal_stderr"]
        return out

    def _line_residual(self, beta, xi):
        lo, hi = self._line_cells(beta)
        mass = _interval_mass(lo, hi)
        return (mass * (self.tau[None, :] - xi[:, None])).sum(1)

    def _solve_line(self, xi, beta0, tol, max_iter):
        span = self.tau[-1] - self.tau[0]
        tol = tol if tol is not None else 1e-13 * max(1.0, np.abs(self.tau).max())
        P = len(xi)
        mid = np.zeros(P) if beta0 is None else np.where(np.isfinite(beta0), beta0, 0.0)
        lo, hi = mid - 1.0, mid + 1.0
        width = np.ones(P)
        for _ in range(2000):
            bad = self._line_residual(lo, xi) > 0
            if not bad.any():
                break
            width[bad] *= 2
            lo[bad] = mid[bad] - width[bad]
        width = np.ones(P)
        for _ in range(2000):
            bad = self._line_residual(hi, xi) < 0
            if not bad.any():
                break
            width[bad] *= 2
            hi[bad] = mid[bad] + width[bad]
        beta = np.clip(mid, lo, hi)
        active = np.ones(P, dtype=bool)
        for _ in range(max_iter):
            r = self._line_residual(beta, xi)
            done = (np.abs(r) <= tol) | (hi - lo <= 4e-16 * np.maximum(1.0, np.abs(beta)))
            active &= ~done
            if not active.any():
                return beta
            lo = np.where(active & (r < 0), beta, lo)
            hi = np.where(active & (r > 0), beta, hi)
            d2 = self._line_eval(beta, ("hess",))["hess"]
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                newton = beta - r / d2
            ok = np.isfinite(newton) & (newton > lo) & (newton < hi)
            # fall back to bisection when Newton leaves the bracket
            nxt = np.where(ok, newton, 0.5 * (lo + hi))
            beta = np.where(active, nxt, beta)
        raise NonConvergence("smoothed conjugate root finding did not converge",
                             {"residual": float(np.abs(self._line_residual(beta, xi)).max()), "span": span})

    def _solve_plane(self, X, b0, tol, max_iter):
        P = len(X)
        B = np.zeros((P, 2)) if b0 is None else np.array(b0, dtype=float).reshape(P, 2)
        active = np.ones(P, dtype=bool)
        r = self.evaluate(B, ("value", "grad", "hess"))
        obj = (X * B).sum(1) - r["value"]
        for _ in range(max_iter):
            g = X - r["grad"]
            gn = np.linalg.norm(g, axis=1)
            active &= gn > tol
            if not active.any():
                return B
            idx = np.nonzero(active)[0]
            H = r["hess"][idx]
            lam = 1e-12 * np.trace(H, axis1=1, axis2=2)[:, None, None] + 1e-300
            d = np.linalg.solve(H + lam * np.eye(2), g[idx][..., None])[..., 0]
            t = np.ones(len(idx))
            cur = obj[idx]
            pending = np.ones(len(idx), dtype=bool)
            newB = B[idx].copy()
            new_r = None
            for _ls in range(60):
                cand = B[idx] + t[:, None] * d
                rc = self.evaluate(cand, ("value", "grad", "hess"))
                oc = (X[idx] * cand).sum(1) - rc["value"]
                accept = pending & (oc >= cur - 1e-13 * (1 + np.abs(cur)))
                if new_r is None:
                    new_r = {k: v.copy() for k, v in rc.items()}
                for k in new_r:
                    new_r[k][accept] = rc[k][accept]
                newB[accept] = cand[accept]
                pending &= ~accept
                if not pending.any():
                    break
                t[pending] *= 0.5
            if pending.any():
                # no ascent possible at working precision
                active[idx[pending]] = False
            B[idx] = newB
            for k in ("value", "grad", "hess"):
                r[k][idx] = new_r[k]
            obj[idx] = (X[idx] * newB).sum(1) - new_r["value"]
        g = np.linalg.norm(X - r["grad"], axis=1)
        if (g > 1e3 * tol).any():
            raise NonConvergence("planar smoothed conjugate did not converge", {"grad_norm": float(g.max())})
        return B


def _point(b, dim):
    return np.asarray(b, dtype=float).reshape(1, dim)


def smoothed_value(p, k, b, mc=None):
    """(v * gamma^s)(b) with a standard-error estimate (zero when exact)."""
    r = Smoother(p, k.variance, mc).evaluate(_point(b, p.dim), ("value",))
    return Estimate(float(r["value"][0]), float(r["stderr"][0]))


def smoothed_gradient(p, k, b, mc=None):
    """Gradient of v * gamma^s at b, a convex combination of the atoms."""
    g = Smoother(p, k.variance, mc).evaluate(_point(b, p.dim), ("grad",))["grad"][0]
    return float(g[0]) if p.dim == 1 else g


def laguerre_masses(p, k, b, mc=None):
    """Masses P(b + sqrt(s) Z in L_j) of the Laguerre cells of v."""
    return Smoother(p, k.variance, mc).evaluate(_point(b, p.dim), ("mass",))["mass"][0]


def smoothed_conjugate(p, k, x, mc=None):
    """Maximize <x, b> - (v * gamma^s)(b) over b.

    Returns
    -------
    value : float
    point : float or ndarray
        The maximizer b*.

    Raises
    ------
    BoundaryAtom
        If x is not in the open relative interior of the atom hull.
    """
    r = Smoother(p, k.variance, mc).conjugate(_point(x, p.dim))
    b = r["point"][0]
    return float(r["value"][0]), (float(b[0]) if p.dim == 1 else b)


@dataclass(frozen=True, eq=False)
class NormalizedPotential:
    """Canonical representative of a potential normalized at an anchor.

    ``values`` are psi_j - offset - <g, y_j - x>, nonnegative on the atoms
    and zero at the anchor.
    """

    base: PwaPotential
    anchor: np.ndarray
    subgradient: np.ndarray
    offset: float
    eps: float

    @property
    def values(self):
        return self.base.values - self.offset - (self.base.atoms - self.anchor) @ self.subgradient

    def at_anchor(self):
        return 0.0


def normalize_at(p, x, eps):
    """Subtract the supporting affine function of the envelope at x.

    The subgradient is the midpoint of the one-sided slopes in one dimension
    (the inner slope at the ends of the hull) and the average of the
    gradients of the incident facets in the plane.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=float).reshape(p.dim)
    info = p.envelope_info()
    scale = max(1.0, np.abs(p.atoms).max())
    tol = 1e-12 * scale
    if info.kind == "point":
        if np.linalg.norm(x - p.atoms[info.vertices[0]]) > tol:
            raise ValueError("anchor outside the hull of the atoms")
        g, off = np.zeros(p.dim), float(info.env[0])
    elif info.kind == "line":
        rel = x - info.origin
        t = float(rel @ info.direction)
        if np.linalg.norm(rel - t * info.direction) > 1e-9 * scale:
            raise ValueError("anchor outside the hull of the atoms")
        vt, vv, sl = info.vtau, info.vval, info.slopes
        if t < vt[0] - tol or t > vt[-1] + tol:
            raise ValueError("anchor outside the hull of the atoms")
        hit = np.nonzero(np.abs(vt - t) <= tol)[0]
        if len(hit):
            i = int(hit[0])
            if len(vt) == 1:
                slope = 0.0
            elif i == 0:
                slope = sl[0]
            elif i == len(vt) - 1:
                slope = sl[-1]
            else:
                slope = 0.5 * (sl[i - 1] + sl[i])
            off = float(vv[i])
        else:
            k = int(np.searchsorted(vt, t)) - 1
            slope = sl[k]
            off = float(vv[k] + slope * (t - vt[k]))
        g = slope * info.direction
    else:
        tri = p.atoms[info.facets]  # F,3,2
        a, b_, c = tri[:, 0], tri[:, 1], tri[:, 2]
        T = np.stack([b_ - a, c - a], axis=2)
        det = np.linalg.det(T)
        ok = np.abs(det) > 1e-300
        lam = np.zeros((len(tri), 2))
        lam[ok] = np.linalg.solve(T[ok], (x - a[ok])[..., None])[..., 0]
        bary = np.column_stack([1 - lam.sum(1), lam])
        inc = ok & (bary.min(1) >= -1e-10)
        if not inc.any():
            raise ValueError("anchor outside the hull of the atoms")
        grads = info.facet_grad[inc]
        uniq = []
        for gr in grads:
            if not any(np.abs(gr - u).max() <= 1e-10 * max(1.0, np.abs(gr).max()) for u in uniq):
                uniq.append(gr)
        g = np.mean(uniq, axis=0)
        off = float((info.facet_grad @ x + info.facet_off).max())
    return NormalizedPotential(p, x, np.asarray(g, dtype=float).reshape(p.dim), off, float(eps))
