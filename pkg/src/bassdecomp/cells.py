"""Relatively open convex cells spanned by finitely many points.

A cell is ``ri conv(V)`` for a finite set V in R^1 or R^2. It is a point, an
open segment (an open interval in 1D) or an open polygon. Predicates use a
margin proportional to the cell diameter.
"""

import numpy as np
from scipy.spatial import ConvexHull

from .simplex import OPTIMAL, solve_lp

MARGIN = 1e-9


def _frame(pts):
    """Affine dimension of a point set: (origin, orthonormal basis rows)."""
    p0 = pts.mean(axis=0)
    if len(pts) == 1:
        return p0, np.zeros((0, pts.shape[1]))
    _, s, vt = np.linalg.svd(pts - p0, full_matrices=False)
    scale = max(1.0, np.abs(pts).max())
    return p0, vt[s > 1e-10 * scale]


class ConvexCell:
    """Relative interior of the convex hull of a finite point set.

    Attributes
    ----------
    dim : int
        Ambient dimension, 1 or 2.
    kind : str
        ``"point"``, ``"segment"`` or ``"polygon"``. One-dimensional
        intervals are segments.
    vertices : ndarray, shape (k, dim)
        Extreme points; polygon vertices are counter-clockwise and segment
        endpoints are sorted along the segment direction.
    """

    def __init__(self, kind, vertices):
        self.vertices = np.array(vertices, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[1] not in (1, 2):
            raise ValueError("vertices must have shape (k, 1) or (k, 2)")
        self.kind = kind
        self.dim = self.vertices.shape[1]

    @classmethod
    def hull(cls, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if len(pts) == 0:
            raise ValueError("empty point set")
        p0, basis = _frame(pts)
        if len(basis) == 0:
            return cls("point", p0[None, :])
        if len(basis) == 1:
            t = (pts - p0) @ basis[0]
            return cls("segment", pts[[int(np.argmin(t)), int(np.argmax(t))]])
        hull = ConvexHull(pts)
        return cls("polygon", pts[hull.vertices])

    @property
    def diameter(self):
        v = self.vertices
        return float(np.linalg.norm(v[:, None] - v[None], axis=-1).max())

    @property
    def affine_dim(self):
        return {"point": 0, "segment": 1, "polygon": 2}[self.kind]

    def _tol(self):
        return MARGIN * max(1.0, self.diameter, np.abs(self.vertices).max())

    def ri_contains(self, x, margin=None):
        """True if x lies in the relative interior, by at least ``margin``."""
        x = np.asarray(x, dtype=float).reshape(self.dim)
        tol = self._tol() if margin is None else margin
        v = self.vertices
        if self.kind == "point":
            return bool(np.linalg.norm(x - v[0]) <= tol)
        if self.kind == "segment":
            d = v[1] - v[0]
            L = np.linalg.norm(d)
            t = (x - v[0]) @ d / L
            off = np.linalg.norm(x - v[0] - t * d / L)
            return bool(off <= tol and tol < t < L - tol)
        e = np.roll(v, -1, axis=0) - v
        rel = x - v
        cross = e[:, 0] * rel[:, 1] - e[:, 1] * rel[:, 0]
        return bool((cross / np.linalg.norm(e, axis=1) > tol).all())

    def closure_contains(self, x, margin=None):
        x = np.asarray(x, dtype=float).reshape(self.dim)
        tol = self._tol() if margin is None else margin
        v = self.vertices
        if self.kind == "point":
            return bool(np.linalg.norm(x - v[0]) <= tol)
        if self.kind == "segment":
            d = v[1] - v[0]
            L = np.linalg.norm(d)
            t = (x - v[0]) @ d / L
            off = np.linalg.norm(x - v[0] - t * d / L)
            return bool(off <= tol and -tol <= t <= L + tol)
        e = np.roll(v, -1, axis=0) - v
        rel = x - v
        cross = e[:, 0] * rel[:, 1] - e[:, 1] * rel[:, 0]
        return bool((cross / np.linalg.norm(e, axis=1) >= -tol).all())

    def ri_intersects(self, other):
        """Whether the relative interiors of two cells meet.

        ri conv(V) is the set of strictly positive convex combinations of V,
        so the question is the LP ``max s`` over weights bounded below by s
        on both sides with equal barycenters.
        """
        if self.kind == "point":
            return other.ri_contains(self.vertices[0])
        if other.kind == "point":
            return self.ri_contains(other.vertices[0])
        if self.dim == 1:
            a0, a1 = sorted(self.vertices[:, 0])
            b0, b1 = sorted(other.vertices[:, 0])
            tol = max(self._tol(), other._tol())
            return bool(min(a1, b1) - max(a0, b0) > tol)
        V, W = self.vertices, other.vertices
        p, q = len(V), len(W)
        # variables: lam' (p), mu' (q), s; lam = lam' + s, mu = mu' + s
        A = np.zeros((self.dim + 2, p + q + 1))
        A[:self.dim, :p] = V.T
        A[:self.dim, p:p + q] = -W.T
        A[:self.dim, -1] = V.sum(0) - W.sum(0)
        A[self.dim, :p] = 1.0
        A[self.dim, -1] = p
        A[self.dim + 1, p:p + q] = 1.0
        A[self.dim + 1, -1] = q
        b = np.zeros(self.dim + 2)
        b[self.dim:] = 1.0
        c = np.zeros(p + q + 1)
        c[-1] = -1.0
        res = solve_lp(c, A, b)
        return bool(res.status == OPTIMAL and -res.fun > MARGIN)

    def to_json(self):
        return {"kind": self.kind, "dim": self.dim, "vertices": self.vertices.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["kind"], np.array(obj["vertices"], dtype=float).reshape(-1, obj["dim"]))

    def same_as(self, other, tol=1e-9):
        if self.kind != other.kind or len(self.vertices) != len(other.vertices):
            return False
        d = np.linalg.norm(self.vertices[:, None] - other.vertices[None], axis=-1)
        return bool((d.min(axis=1) <= tol).all() and (d.min(axis=0) <= tol).all())

    def __repr__(self):
        return f"ConvexCell({self.kind!r}, {self.vertices.tolist()!r})"
