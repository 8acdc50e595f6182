"""Monte Carlo verification of transport and log-Sobolev inequalities
for Brownian path functionals: optimal stopping values, BSDE value and
control processes, and one-dimensional SDEs with irregular drift.
"""

__version__ = "0.1.0"
