"""Compiled inner loops. Falls back to None when numba is unavailable."""

import math

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _line_envelope(A, slope, order, L, H, il, ih):
    """Upper envelope of t -> A[r, j] + slope[r % K, j] t for every row r.

    Fills L, H with the t-interval on which line j is on top (zeros for
    lines that never are) and il, ih with the neighbouring envelope lines.
    """
    N, m = A.shape
    K = slope.shape[0]
    st = np.empty(m, np.int64)
    for r in range(N):
        k = r % K
        sz = 0
        for s in range(m):
            j = order[k, s]
            if sz >= 1:
                t = st[sz - 1]
                if slope[k, t] == slope[k, j]:
                    # equal slopes: the higher line survives, the earlier on ties
                    if A[r, j] > A[r, t]:
                        sz -= 1
                    else:
                        continue
            while sz >= 2:
                t1 = st[sz - 1]
                t0 = st[sz - 2]
                lhs = (A[r, t0] - A[r, t1]) * (slope[k, j] - slope[k, t1])
                rhs = (A[r, t1] - A[r, j]) * (slope[k, t1] - slope[k, t0])
                if lhs >= rhs:
                    sz -= 1
                else:
                    break
            st[sz] = j
            sz += 1
        for q in range(m):
            L[r, q] = 0.0
            H[r, q] = 0.0
            il[r, q] = q
            ih[r, q] = q
        for q in range(sz):
            j = st[q]
            if q == 0:
                L[r, j] = -np.inf
            else:
                p = st[q - 1]
                il[r, j] = p
                L[r, j] = (A[r, p] - A[r, j]) / (slope[k, j] - slope[k, p])
            if q == sz - 1:
                H[r, j] = np.inf
            else:
                n = st[q + 1]
                ih[r, j] = n
                H[r, j] = (A[r, j] - A[r, n]) / (slope[k, n] - slope[k, j])


WINDOW = 10.0  # Phi(-10) is below 1e-23


def _line_moments(beta, c, tau, sd, m1, m2, hess):
    """First two moments of tau and d m1 / d beta for Gaussian line smoothing.

    The cell of tau_k is (c_{k-1}, c_k) in b-space, so with
    Phi_k = Phi((beta - c_k) / sd)

        m1 = tau_0 + sum_k (tau_{k+1} - tau_k) Phi_k,

    and likewise for tau^2. Breakpoints beyond WINDOW standard deviations
    contribute exactly 0 or 1 and are skipped by bisection.
    """
    m = c.shape[0]
    inv = 1.0 / sd
    norm = 1.0 / math.sqrt(2.0 * math.pi)
    for r in range(beta.shape[0]):
        b = beta[r]
        lo = np.searchsorted(c, b - WINDOW * sd)
        hi = np.searchsorted(c, b + WINDOW * sd)
        a1 = tau[lo]
        a2 = tau[lo] * tau[lo]
        h = 0.0
        for k in range(lo, hi):
            z = (b - c[k]) * inv
            ph = 0.5 * math.erfc(-z / math.sqrt(2.0))
            d1 = tau[k + 1] - tau[k]
            a1 += d1 * ph
            a2 += (tau[k + 1] * tau[k + 1] - tau[k] * tau[k]) * ph
            h += d1 * norm * math.exp(-0.5 * z * z)
        m1[r] = a1
        m2[r] = a2
        hess[r] = h * inv
    return m


if numba is not None:
    line_envelope = numba.njit(cache=True)(_line_envelope)
    line_moments = numba.njit(cache=True)(_line_moments)
else:  # pragma: no cover
    line_envelope = line_moments = None
