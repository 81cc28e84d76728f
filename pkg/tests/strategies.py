"""Hypothesis strategies for small measures."""

import numpy as np
from hypothesis import strategies as st

from bassdecomp.examples import random_split_pair
from bassdecomp.measures import DiscreteMeasure

coords = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


@st.composite
def measures_1d(draw, min_size=1, max_size=8):
    n = draw(st.integers(min_size, max_size))
    xs = draw(st.lists(coords, min_size=n, max_size=n, unique=True))
    w = np.array(draw(st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n)))
    return DiscreteMeasure(np.round(xs, 6), w / w.sum())


@st.composite
def split_pairs(draw, n_mu=4, max_nu=10, grid=None):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    return random_split_pair(np.random.default_rng(seed), n_mu, max_nu, grid=grid)


def strict_split_pair(rng, **kw):
    """Split pair whose source atoms all lie strictly inside the target hull.

    random_split_pair leaves an atom unsplit when the target budget runs
    out, and such an atom may sit on the hull boundary.
    """
    while True:
        mu, nu = random_split_pair(rng, **kw)
        lo, hi = nu.atoms.min(), nu.atoms.max()
        if np.all((mu.atoms > lo) & (mu.atoms < hi)):
            return mu, nu


@st.composite
def strict_split_pairs(draw, n_mu=4, max_nu=10):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    return strict_split_pair(np.random.default_rng(seed), n_mu=n_mu, max_nu=max_nu)
