"""Finitely supported probability measures on R^d (d = 1, 2) and couplings."""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from . import _jsonio
from .errors import MeasureError

MERGE_TOL = 1e-12
SUM_TOL = 1e-9


def _as_atoms(atoms):
    a = np.asarray(atoms, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[1] not in (1, 2):
        raise MeasureError(f"atoms must have shape (n,) or (n, d) with d in (1, 2), got {a.shape}")
    return a


def _merge_duplicates(atoms, weights, tol):
    n = len(atoms)
    if n < 2:
        return atoms, weights
    diff = atoms[:, None, :] - atoms[None, :, :]
    close = np.sqrt((diff ** 2).sum(-1)) <= tol
    if close.sum() == n:
        return atoms, weights
    label = np.arange(n)
    for i in range(n):
        for j in np.nonzero(close[i, i + 1:])[0] + i + 1:
            a, b = label[i], label[j]
            if a != b:
                label[label == max(a, b)] = min(a, b)
    keep = np.unique(label)
    merged = np.array([weights[label == k].sum() for k in keep])
    return atoms[keep], merged


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Probability measure with finitely many atoms.

    Construction merges atoms closer than ``1e-12``, drops zero-weight atoms
    and rescales the weights to sum to one. A weight total that misses one by
    more than ``1e-9`` is rejected.

    Parameters
    ----------
    atoms : array_like, shape (n,) or (n, d)
    weights : array_like, shape (n,)
    """

    atoms: np.ndarray
    weights: np.ndarray

    def __init__(self, atoms, weights, *, _trusted=False):
        a = _as_atoms(atoms)
        w = np.asarray(weights, dtype=float).ravel()
        if not _trusted:
            if len(a) != len(w):
                raise MeasureError(f"{len(a)} atoms but {len(w)} weights")
            if len(a) == 0:
                raise MeasureError("a measure needs at least one atom")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(w))):
                raise MeasureError("non-finite atom or weight")
            if np.any(w < 0):
                raise MeasureError("negative weight")
            total = w.sum()
            if abs(total - 1.0) > SUM_TOL:
                raise MeasureError(f"weights sum to {total!r}, not 1")
            a, w = _merge_duplicates(a, w, MERGE_TOL)
            pos = w > 0
            a, w = a[pos], w[pos]
            # rescaling a sum that is already 1 to rounding would make a
            # save/load cycle inexact
            if abs(w.sum() - 1.0) > 1e-14:
                w = w / w.sum()
        a = np.ascontiguousarray(a)
        w = np.ascontiguousarray(w)
        a.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "atoms", a)
        object.__setattr__(self, "weights", w)

    @classmethod
    def trusted(cls, atoms, weights):
        """Build without validation; caller guarantees the invariants."""
        return cls(atoms, weights, _trusted=True)

    @classmethod
    def dirac(cls, point):
        return cls(np.atleast_1d(np.asarray(point, dtype=float))[None, :], [1.0])

    @property
    def dim(self):
        return self.atoms.shape[1]

    def __len__(self):
        return len(self.weights)

    @property
    def barycenter(self):
        return self.weights @ self.atoms

    def __repr__(self):
        return f"DiscreteMeasure(dim={self.dim}, n={len(self)})"

    def to_json(self):
        return {"dim": self.dim, "atoms": self.atoms.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_json(cls, obj):
        try:
            dim = int(obj["dim"])
            atoms = obj["atoms"]
            weights = obj["weights"]
        except (KeyError, TypeError) as exc:
            raise MeasureError(f"malformed measure object: {exc}") from None
        if dim not in (1, 2):
            raise MeasureError(f"unsupported dim {dim}")
        try:
            a = np.array(atoms, dtype=float).reshape(len(atoms), dim)
        except (ValueError, TypeError):
            raise MeasureError("atom rows do not match dim") from None
        return cls(a, weights)


class Coupling:
    """Nonnegative mass matrix between source atoms (rows) and target atoms (cols).

    Only nonnegativity is enforced at construction; marginal constraints are
    checked against concrete measures with :meth:`validate`, since induced
    couplings of unconverged dual iterates have the right rows but not yet the
    right columns.
    """

    def __init__(self, mass):
        m = np.array(mass, dtype=float)
        if m.ndim != 2:
            raise MeasureError("coupling mass must be a matrix")
        if not np.all(np.isfinite(m)):
            raise MeasureError("non-finite coupling mass")
        if np.any(m < -1e-12):
            raise MeasureError("negative coupling mass")
        m = np.maximum(m, 0.0)
        m.setflags(write=False)
        self.mass = m

    @property
    def rows(self):
        return self.mass.shape[0]

    @property
    def cols(self):
        return self.mass.shape[1]

    def row_sums(self):
        return self.mass.sum(axis=1)

    def col_sums(self):
        return self.mass.sum(axis=0)

    def conditional(self, i):
        """Normalized row ``i`` (the kernel pi_x for source atom i)."""
        row = self.mass[i]
        return row / row.sum()

    def marginal_residuals(self, mu, nu):
        return (np.abs(self.row_sums() - mu.weights).max(),
                np.abs(self.col_sums() - nu.weights).max())

    def barycenter_defect(self, mu, nu):
        """max_i |bary(pi_{x_i}) - x_i| over rows with positive mass."""
        rs = self.row_sums()
        ok = rs > 0
        bary = (self.mass[ok] @ nu.atoms) / rs[ok, None]
        if not ok.any():
            return 0.0
        return float(np.abs(bary - mu.atoms[ok]).max())

    def validate(self, mu, nu, tol=1e-9):
        if self.mass.shape != (len(mu), len(nu)):
            raise MeasureError(f"coupling shape {self.mass.shape} does not match measures")
        r, c = self.marginal_residuals(mu, nu)
        if r > tol or c > tol:
            raise MeasureError(f"marginal residuals {r:.3g} / {c:.3g} exceed {tol:g}")

    def to_json(self):
        return {"rows": self.rows, "cols": self.cols, "mass": self.mass.tolist()}

    @classmethod
    def from_json(cls, obj):
        try:
            mass = np.array(obj["mass"], dtype=float)
            shape = (int(obj["rows"]), int(obj["cols"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise MeasureError(f"malformed coupling object: {exc}") from None
        if mass.shape != shape:
            raise MeasureError("coupling rows/cols do not match mass matrix")
        return cls(mass)


def potential_function(m, t):
    """u_m(t) = sum_i w_i |t - x_i| for a one-dimensional measure."""
    if m.dim != 1:
        raise MeasureError("potential functions are defined for dim 1 only")
    t = np.asarray(t, dtype=float)
    return np.abs(t[..., None] - m.atoms[:, 0]) @ m.weights


def check_convex_order(mu, nu):
    """Decide mu <=_c nu by feasibility of the martingale transport LP.

    Returns
    -------
    ok : bool
    certificate : Coupling or dict
        A feasible martingale coupling, or a description of a convex test
        function whose integral against mu exceeds that against nu.
    """
    from . import motlp

    if mu.dim != nu.dim:
        raise MeasureError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    res = motlp.feasible(mu, nu)
    if isinstance(res, Coupling):
        return True, res
    return False, res.witness


def load_measure(path):
    try:
        obj = _jsonio.load(path)
    except OSError as exc:
        raise MeasureError(f"{path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise MeasureError(f"{path}: invalid JSON ({exc})") from None
    return DiscreteMeasure.from_json(obj)


def save_measure(m, path):
    _jsonio.dump(m.to_json(), path)


def _midpoint_quantiles(n):
    p = (np.arange(n) + 0.5) / n
    q = ndtri(p)
    # mirror so symmetric laws keep mean exactly zero
    half = n // 2
    q[n - half:] = -q[:half][::-1]
    if n % 2:
        q[half] = 0.0
    return q


def _lognormal_atoms(n, scheme):
    if scheme == "midpoint":
        return np.exp(_midpoint_quantiles(n) - 0.5)
    if scheme == "moment":
        z = _midpoint_quantiles(n)
        y = np.exp(z / z.std() - 0.5)
        return y / y.mean()
    if scheme == "conditional":
        edges = np.concatenate([[-np.inf], ndtri(np.arange(1, n) / n), [np.inf]])
        return n * np.diff(ndtr(edges - 1.0))
    raise MeasureError(f"unknown discretization scheme {scheme!r}")


def quantile_discretize(spec, n, **params):
    """Equal-weight discretization of a named law.

    Parameters
    ----------
    spec : str or dict
        ``"gaussian"``, ``"lognormal_plus"`` (law of exp(Z - 1/2)),
        ``"lognormal_minus"`` (its mirror image) or ``"circle"``. A dict
        ``{"name": ..., **params}`` is also accepted.
    n : int
        Number of atoms, at least 2.
    scheme : {"midpoint", "moment", "conditional"}, optional
        Lognormal laws only. ``"midpoint"`` places atoms at the quantiles
        (k - 1/2)/n. ``"moment"`` first rescales the Gaussian midpoint
        quantiles to unit variance and then the atoms to mean exactly one.
        ``"conditional"`` uses the conditional mean of each quantile bin,
        which is dominated by the continuous law in convex order.
    scale : float, optional
        Standard deviation for ``"gaussian"``.
    radius, offset : float, optional
        For ``"circle"``: atoms at radius * exp(2 pi i (k + offset) / n).
    """
    if isinstance(spec, dict):
        params = {**{k: v for k, v in spec.items() if k != "name"}, **params}
        spec = spec["name"]
    if n < 2:
        raise MeasureError("need n >= 2 atoms")
    w = np.full(n, 1.0 / n)
    if spec == "gaussian":
        scale = params.get("scale", 1.0)
        return DiscreteMeasure(scale * _midpoint_quantiles(n), w)
    if spec in ("lognormal_plus", "lognormal_minus"):
        y = _lognormal_atoms(n, params.get("scheme", "midpoint"))
        return DiscreteMeasure(y if spec == "lognormal_plus" else -y[::-1], w)
    if spec == "circle":
        r = params.get("radius", 1.0)
        theta = 2 * np.pi * (np.arange(n) + params.get("offset", 0.0)) / n
        return DiscreteMeasure(r * np.column_stack([np.cos(theta), np.sin(theta)]), w)
    raise MeasureError(f"unknown discretization spec {spec!r}")


def mixture(measures, weights):
    """Convex combination sum_k weights[k] * measures[k]."""
    atoms = np.vstack([m.atoms for m in measures])
    w = np.concatenate([lam * m.weights for m, lam in zip(measures, weights)])
    return DiscreteMeasure(atoms, w)
