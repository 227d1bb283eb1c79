"""Partially observable stochastic differential dynamic programming.

Joint optimization of nominal control sequences and linear feedback gains
under belief-space dynamics (nominal state, estimation-error covariance,
state-estimate covariance), with general mission constraints handled by an
augmented Lagrangian and closed-loop EKF Monte Carlo validation.
"""

import jax as _jax

# All numerics in this package assume double precision.
_jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
