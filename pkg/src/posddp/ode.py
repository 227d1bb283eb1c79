"""Adaptive explicit Runge-Kutta integration.

A single embedded pair is used for the state and all variational components,
flattened into one vector so they share step-size control. The default pair
is Fehlberg 7(8) (13 stages, 8th-order solution advanced, 7th-order error
estimate); a Dormand-Prince 5(4) pair is available via ``method_order=5``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DivergenceError, IntegrationError

# Fehlberg 7(8) coefficients (exact rationals).
RKF78_C = np.array([
    0.0, 2 / 27, 1 / 9, 1 / 6, 5 / 12, 1 / 2, 5 / 6, 1 / 6, 2 / 3, 1 / 3,
    1.0, 0.0, 1.0,
])
RKF78_A = np.zeros((13, 13))
RKF78_A[1, 0] = 2 / 27
RKF78_A[2, :2] = [1 / 36, 1 / 12]
RKF78_A[3, :3] = [1 / 24, 0, 1 / 8]
RKF78_A[4, :4] = [5 / 12, 0, -25 / 16, 25 / 16]
RKF78_A[5, :5] = [1 / 20, 0, 0, 1 / 4, 1 / 5]
RKF78_A[6, :6] = [-25 / 108, 0, 0, 125 / 108, -65 / 27, 125 / 54]
RKF78_A[7, :7] = [31 / 300, 0, 0, 0, 61 / 225, -2 / 9, 13 / 900]
RKF78_A[8, :8] = [2, 0, 0, -53 / 6, 704 / 45, -107 / 9, 67 / 90, 3]
RKF78_A[9, :9] = [-91 / 108, 0, 0, 23 / 108, -976 / 135, 311 / 54, -19 / 60,
                  17 / 6, -1 / 12]
RKF78_A[10, :10] = [2383 / 4100, 0, 0, -341 / 164, 4496 / 1025, -301 / 82,
                    2133 / 4100, 45 / 82, 45 / 164, 18 / 41]
RKF78_A[11, :11] = [3 / 205, 0, 0, 0, 0, -6 / 41, -3 / 205, -3 / 41, 3 / 41,
                    6 / 41, 0]
RKF78_A[12, :12] = [-1777 / 4100, 0, 0, -341 / 164, 4496 / 1025, -289 / 82,
                    2193 / 4100, 51 / 82, 33 / 164, 12 / 41, 0, 1]
# 8th-order solution weights and (8th minus 7th) error weights.
RKF78_B = np.array([0, 0, 0, 0, 0, 34 / 105, 9 / 35, 9 / 35, 9 / 280, 9 / 280,
                    0, 41 / 840, 41 / 840])
RKF78_E = np.array([-41 / 840, 0, 0, 0, 0, 0, 0, 0, 0, 0, -41 / 840,
                    41 / 840, 41 / 840])
RKF78_ERR_EXPONENT = 1 / 8

# Dormand-Prince 5(4).
DOPRI5_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
DOPRI5_A = np.zeros((7, 7))
DOPRI5_A[1, 0] = 1 / 5
DOPRI5_A[2, :2] = [3 / 40, 9 / 40]
DOPRI5_A[3, :3] = [44 / 45, -56 / 15, 32 / 9]
DOPRI5_A[4, :4] = [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]
DOPRI5_A[5, :5] = [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176,
                   -5103 / 18656]
DOPRI5_A[6, :6] = [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]
DOPRI5_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784,
                     11 / 84, 0])
DOPRI5_E = DOPRI5_B - np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640,
                                -92097 / 339200, 187 / 2100, 1 / 40])
DOPRI5_ERR_EXPONENT = 1 / 5

_TABLEAUS = {
    8: (RKF78_C, RKF78_A, RKF78_B, RKF78_E, RKF78_ERR_EXPONENT),
    5: (DOPRI5_C, DOPRI5_A, DOPRI5_B, DOPRI5_E, DOPRI5_ERR_EXPONENT),
}

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0


@dataclass(frozen=True)
class IntegratorOptions:
    """Error-control settings for adaptive integration."""

    rel_tol: float = 1e-10
    abs_tol: float = 1e-10
    max_steps: int = 100_000
    method_order: int = 8

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ConfigError("integrator tolerances must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        if self.method_order not in _TABLEAUS:
            raise ConfigError(
                f"unsupported method_order {self.method_order}; "
                f"choose one of {sorted(_TABLEAUS)}"
            )


def _error_norm(err, y0, y1, opts):
    scale = opts.abs_tol + opts.rel_tol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(rhs, y0, f0, t0, dt_total, opts):
    scale = opts.abs_tol + opts.rel_tol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6 * dt_total
    else:
        h0 = 0.01 * d0 / d1
    y1 = y0 + h0 * f0
    f1 = np.asarray(rhs(t0 + h0, y1), dtype=float)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6 * dt_total, h0 * 1e-3)
    else:
        order = 8 if opts.method_order == 8 else 5
        h1 = (0.01 / max(d1, d2)) ** (1.0 / order)
    return min(100 * h0, h1, dt_total)


def integrate(rhs, y0, t0, t1, opts=IntegratorOptions()):
    """Integrate dy/dt = rhs(t, y) from t0 to t1 and return y(t1).

    Raises :class:`IntegrationError` (with the last reached time) if the step
    budget is exhausted and :class:`DivergenceError` if the right-hand side
    produces non-finite values.
    """
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if t1 < t0:
        raise ConfigError("integrate requires t1 >= t0")
    if t1 == t0:
        return y0.copy()

    c, A, b, e, err_exp = _TABLEAUS[opts.method_order]
    n_stages = len(c)
    k = np.empty((n_stages, y0.size))

    t = float(t0)
    y = y0.copy()
    f0 = np.asarray(rhs(t, y), dtype=float)
    if not np.all(np.isfinite(f0)):
        raise DivergenceError(f"non-finite right-hand side at t={t}")
    h = _initial_step(rhs, y, f0, t, t1 - t0, opts)

    for _ in range(opts.max_steps):
        h = min(h, t1 - t)
        k[0] = rhs(t, y)
        for i in range(1, n_stages):
            yi = y + h * (A[i, :i] @ k[:i])
            k[i] = rhs(t + c[i] * h, yi)
        if not np.all(np.isfinite(k)):
            raise DivergenceError(f"non-finite right-hand side near t={t}")
        y_new = y + h * (b @ k)
        err = h * (e @ k)
        err_norm = _error_norm(err, y, y_new, opts)

        if err_norm <= 1.0:
            t += h
            y = y_new
            if t >= t1 - 1e-14 * max(abs(t1), 1.0):
                return y
            factor = _MAX_FACTOR if err_norm == 0.0 else min(
                _MAX_FACTOR, _SAFETY * err_norm ** (-err_exp))
            h *= max(factor, 1.0)
        else:
            h *= max(_MIN_FACTOR, _SAFETY * err_norm ** (-err_exp))
    raise IntegrationError(
        f"step budget ({opts.max_steps}) exhausted at t={t}", t_reached=t
    )
