"""Maximal covariance between a discrete measure and the standard Gaussian."""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .convexfn import _affine_frame, _npdf
from .errors import MeasureError, NonConvergence
from .measures import DiscreteMeasure


@dataclass(frozen=True)
class McovResult:
    """MCov value with semi-discrete dual weights.

    Attributes
    ----------
    value : float
    dual_weights : ndarray
        Potentials phi_j with the gauge phi_0 = 0. The Laguerre cells of
        ``max_j <z, y_j> - phi_j`` carry Gaussian mass p_j at the optimum.
    error_estimate : float
        Zero for exact computations, otherwise a Monte Carlo standard error.
    """

    value: float
    dual_weights: np.ndarray
    error_estimate: float = 0.0
    marginal_error: float = 0.0


def _comonotone(y, w):
    order = np.argsort(y, kind="stable")
    ys, ws = y[order], w[order]
    cum = np.cumsum(ws)[:-1]
    q = ndtri(np.clip(cum, 0.0, 1.0))
    dens = np.concatenate([[0.0], _npdf(q), [0.0]])
    value = float(ys @ (dens[:-1] - dens[1:]))
    phi_sorted = np.concatenate([[0.0], np.cumsum(q * np.diff(ys))])
    phi = np.empty_like(phi_sorted)
    phi[order] = phi_sorted
    return value, phi - phi[0]


def mcov_1d(p):
    """Exact MCov(p, gamma) through the comonotone (quantile) coupling."""
    if p.dim != 1:
        raise MeasureError("mcov_1d needs a one-dimensional measure")
    value, phi = _comonotone(p.atoms[:, 0], p.weights)
    return McovResult(value, phi, 0.0)


def _reduced(p):
    """Exact value when the atoms lie on a line; None otherwise."""
    p0, basis = _affine_frame(p.atoms)
    if len(basis) == 0:
        return McovResult(0.0, np.zeros(len(p)), 0.0)
    if len(basis) == 1:
        tau = (p.atoms - p0) @ basis[0]
        # <z, p0> is common to all atoms, so the 1D weights carry over
        value, phi = _comonotone(tau, p.weights)
        return McovResult(value, phi, 0.0)
    return None


def mcov_semidiscrete(p, mc=None, *, steps=3000, batch=256, holdout=200_000, step_scale=0.5):
    """MCov(p, gamma_2) by averaged stochastic subgradient on the semi-discrete dual.

    Minimizes ``F(phi) = sum_j p_j phi_j + E max_j (<Z, y_j> - phi_j)`` with
    Polyak-Ruppert averaging over the second half of the run, then reports
    F at the averaged weights on a fresh held-out batch together with its
    standard error. Atoms on a common line are handled exactly.

    Parameters
    ----------
    p : DiscreteMeasure, dim 2
    mc : MCConfig, optional
        Only the seed is used.
    """
    if p.dim != 2:
        raise MeasureError("mcov_semidiscrete needs a two-dimensional measure")
    red = _reduced(p)
    if red is not None:
        return red
    seed = 0 if mc is None else mc.seed
    rng = np.random.default_rng([seed, 0x6D636F76])
    Y, w = p.atoms, p.weights
    m = len(w)
    scale = max(1.0, np.abs(Y).max())
    phi = np.zeros(m)
    avg = np.zeros(m)
    n_avg = 0
    for k in range(1, steps + 1):
        Z = rng.standard_normal((batch, 2))
        j = np.argmax(Z @ Y.T - phi, axis=1)
        grad = w - np.bincount(j, minlength=m) / batch
        phi -= step_scale * scale / np.sqrt(k) * grad
        phi -= phi[0]
        if k > steps // 2:
            n_avg += 1
            avg += (phi - avg) / n_avg
    Z = rng.standard_normal((holdout, 2))
    scores = Z @ Y.T - avg
    j = np.argmax(scores, axis=1)
    samples = scores[np.arange(holdout), j] + avg @ w
    value = float(samples.mean())
    se = float(samples.std(ddof=1) / np.sqrt(holdout))
    mass = np.bincount(j, minlength=m) / holdout
    mis = float(np.abs(mass - w).max())
    if mis > 0.05:
        primal = float((Y[j] * Z).sum(1).mean())
        raise NonConvergence("semi-discrete MCov did not converge",
                             {"gap": value - primal, "marginal_error": mis})
    return McovResult(value, avg, se, mis)


def mcov(p, mc=None):
    """Dispatch to the exact 1D formula or the planar stochastic solver."""
    return mcov_1d(p) if p.dim == 1 else mcov_semidiscrete(p, mc)


def mcov_rows(rows, atoms, mc=None):
    """MCov of each normalized row of a mass matrix against the given atoms."""
    out = np.zeros(len(rows))
    err = np.zeros(len(rows))
    for i, row in enumerate(rows):
        keep = row > 0
        q = DiscreteMeasure.trusted(atoms[keep], row[keep] / row[keep].sum())
        r = mcov(q, mc)
        out[i], err[i] = r.value, r.error_estimate
    return out, err
