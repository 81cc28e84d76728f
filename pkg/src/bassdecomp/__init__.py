"""Stretched Brownian motion with a Gaussian reference for discrete marginals.

Dual solver, Bass paving detection and Bass martingale simulation.
"""

__version__ = "0.1.0"
