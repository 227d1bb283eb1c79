"""STMs of the nominal dynamics, model derivatives, process-noise discretization.

First- and second-order state transition matrices are obtained by integrating
the variational equations alongside the state as one flattened vector (shared
step-size control). Model-level Jacobians/Hessians come from forward-mode
dual-number differentiation (``jax.jacfwd``, nested for Hessians) applied to
the user-supplied model callables.
"""

from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from . import ode
from .errors import ConfigError, DivergenceError, IntegrationError, NoiseCovarianceSingularError
from .linalg import sym
from .ode import IntegratorOptions

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0

_RUNNING, _DONE, _DIVERGED, _BUDGET = 0, 1, 2, 3


def rk_integrate_jax(rhs, y0, t0, t1, rel_tol, abs_tol, max_steps):
    """JAX twin of :func:`posddp.ode.integrate` (Fehlberg 7(8), same control law).

    Traceable; returns ``(y1, status, t_reached)`` with status in
    {1: done, 2: non-finite rhs, 3: step budget exhausted}.
    """
    A = ode.RKF78_A
    c = ode.RKF78_C
    b = ode.RKF78_B
    e = ode.RKF78_E
    n_stages = len(c)

    def rk_step(t, y, h):
        ks = [rhs(t, y)]
        for i in range(1, n_stages):
            acc = sum(A[i, j] * ks[j] for j in range(i) if A[i, j] != 0.0)
            ks.append(rhs(t + c[i] * h, y + h * acc))
        K = jnp.stack(ks)
        y_new = y + h * (b @ K)
        err = h * (e @ K)
        return y_new, err

    def err_norm(err, y_old, y_new):
        scale = abs_tol + rel_tol * jnp.maximum(jnp.abs(y_old), jnp.abs(y_new))
        return jnp.sqrt(jnp.mean((err / scale) ** 2))

    dt_total = t1 - t0
    f0 = rhs(t0, y0)
    scale0 = abs_tol + rel_tol * jnp.abs(y0)
    d0 = jnp.sqrt(jnp.mean((y0 / scale0) ** 2))
    d1 = jnp.sqrt(jnp.mean((f0 / scale0) ** 2))
    h0 = jnp.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6 * dt_total,
                   0.01 * d0 / jnp.maximum(d1, 1e-300))
    f1 = rhs(t0 + h0, y0 + h0 * f0)
    d2 = jnp.sqrt(jnp.mean(((f1 - f0) / scale0) ** 2)) / h0
    dmax = jnp.maximum(d1, d2)
    h1 = jnp.where(dmax <= 1e-15, jnp.maximum(1e-6 * dt_total, h0 * 1e-3),
                   (0.01 / jnp.maximum(dmax, 1e-300)) ** (1 / 8))
    h_init = jnp.minimum(jnp.minimum(100 * h0, h1), dt_total)

    def cond(carry):
        _, _, _, _, status = carry
        return status == _RUNNING

    def body(carry):
        t, y, h, steps, status = carry
        h = jnp.minimum(h, t1 - t)
        y_new, err = rk_step(t, y, h)
        finite = jnp.all(jnp.isfinite(y_new)) & jnp.all(jnp.isfinite(err))
        en = jnp.maximum(err_norm(err, y, y_new), 1e-300)
        accept = (en <= 1.0) & finite
        t_next = jnp.where(accept, t + h, t)
        y_next = jnp.where(accept, y_new, y)
        factor = jnp.where(
            accept,
            jnp.maximum(jnp.minimum(_MAX_FACTOR, _SAFETY * en ** (-1 / 8)), 1.0),
            jnp.maximum(_MIN_FACTOR, _SAFETY * en ** (-1 / 8)),
        )
        h_next = h * factor
        steps = steps + 1
        done = t_next >= t1 - 1e-14 * jnp.maximum(jnp.abs(t1), 1.0)
        status = jnp.where(~finite, _DIVERGED,
                           jnp.where(done, _DONE,
                                     jnp.where(steps >= max_steps, _BUDGET, _RUNNING)))
        return t_next, y_next, h_next, steps, status

    init = (jnp.asarray(t0, dtype=jnp.float64), y0, h_init, 0, _RUNNING)
    t_fin, y_fin, _, _, status = jax.lax.while_loop(cond, body, init)
    return y_fin, status, t_fin


def _raise_for_status(status, t_reached, max_steps):
    if status == _DONE:
        return
    if status == _DIVERGED:
        raise DivergenceError(f"non-finite right-hand side near t={t_reached}")
    raise IntegrationError(
        f"step budget ({max_steps}) exhausted at t={t_reached}", t_reached=float(t_reached)
    )


@dataclass
class StateStms:
    """First/second-order STMs of the nominal flow over one interval.

    A = dx1/dx0, B = dx1/du; Phi_xx[i,a,b] = d2 x1_i / dx_a dx_b,
    Phi_ux[i,a,b] = d2 x1_i / du_a dx_b, Phi_uu[i,a,b] = d2 x1_i / du_a du_b.
    Second-order tensors are None when not requested.
    """

    A: np.ndarray
    B: np.ndarray
    Phi_xx: np.ndarray = None
    Phi_ux: np.ndarray = None
    Phi_uu: np.ndarray = None


def _layout(n_x, n_u, second_order):
    sizes = [n_x, n_x * n_x, n_x * n_u]
    if second_order:
        sizes += [n_x**3, n_x * n_u * n_x, n_x * n_u * n_u]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return offsets, int(offsets[-1])


def _variational_rhs(drift, n_x, n_u, second_order):
    f_x = jax.jacfwd(drift, argnums=0)
    f_u = jax.jacfwd(drift, argnums=1)
    f_xx = jax.jacfwd(f_x, argnums=0)
    f_ux = jax.jacfwd(f_u, argnums=0)
    f_uu = jax.jacfwd(f_u, argnums=1)
    offsets, _ = _layout(n_x, n_u, second_order)

    def rhs(t, y, u):
        x = y[: offsets[1]]
        PhiA = y[offsets[1]:offsets[2]].reshape(n_x, n_x)
        PhiB = y[offsets[2]:offsets[3]].reshape(n_x, n_u)
        f = drift(x, u, t)
        Ab = f_x(x, u, t)
        Bb = f_u(x, u, t)
        parts = [f, (Ab @ PhiA).ravel(), (Ab @ PhiB + Bb).ravel()]
        if second_order:
            Pxx = y[offsets[3]:offsets[4]].reshape(n_x, n_x, n_x)
            Pux = y[offsets[4]:offsets[5]].reshape(n_x, n_u, n_x)
            Puu = y[offsets[5]:offsets[6]].reshape(n_x, n_u, n_u)
            Ax = f_xx(x, u, t)  # (n_x, n_x, n_x): d2f_i/dx_a dx_b
            Bx = f_ux(x, u, t)  # (n_x, n_u, n_x): d2f_i/du_a dx_b
            Bu = f_uu(x, u, t)  # (n_x, n_u, n_u)
            dPxx = (jnp.einsum("ij,jab->iab", Ab, Pxx)
                    + jnp.einsum("pqr,qa,rb->pab", Ax, PhiA, PhiA))
            dPux = (jnp.einsum("ij,jab->iab", Ab, Pux)
                    + jnp.einsum("pqr,qa,rb->pab", Ax, PhiB, PhiA)
                    + jnp.einsum("paq,qb->pab", Bx, PhiA))
            dPuu = (jnp.einsum("ij,jab->iab", Ab, Puu)
                    + jnp.einsum("pqr,qa,rb->pab", Ax, PhiB, PhiB)
                    + jnp.einsum("paq,qb->pab", Bx, PhiB)
                    + jnp.einsum("pbq,qa->pab", Bx, PhiB)
                    + Bu)
            parts += [dPxx.ravel(), dPux.ravel(), dPuu.ravel()]
        return jnp.concatenate(parts)

    return rhs


def _stm_kernel(model, second_order, opts):
    """Jitted (x, u, t0, t1) -> (flat variational state, status, t_reached)."""
    key = ("stm", second_order, opts)
    if key in model._cache:
        return model._cache[key]
    n_x, n_u = model.n_x, model.n_u
    rhs = _variational_rhs(model.drift, n_x, n_u, second_order)
    offsets, total = _layout(n_x, n_u, second_order)

    @jax.jit
    def run(x, u, t0, t1):
        y0 = jnp.zeros(total)
        y0 = y0.at[: n_x].set(x)
        y0 = y0.at[offsets[1]:offsets[2]].set(jnp.eye(n_x).ravel())
        return rk_integrate_jax(
            lambda t, y: rhs(t, y, u), y0, t0, t1,
            opts.rel_tol, opts.abs_tol, opts.max_steps,
        )

    model._cache[key] = run
    return run


def _unpack_stms(yflat, n_x, n_u, second_order):
    offsets, _ = _layout(n_x, n_u, second_order)
    x1 = np.asarray(yflat[: n_x])
    A = np.asarray(yflat[offsets[1]:offsets[2]]).reshape(n_x, n_x)
    B = np.asarray(yflat[offsets[2]:offsets[3]]).reshape(n_x, n_u)
    if not second_order:
        return x1, StateStms(A=A, B=B)
    Pxx = np.asarray(yflat[offsets[3]:offsets[4]]).reshape(n_x, n_x, n_x)
    Pux = np.asarray(yflat[offsets[4]:offsets[5]]).reshape(n_x, n_u, n_x)
    Puu = np.asarray(yflat[offsets[5]:offsets[6]]).reshape(n_x, n_u, n_u)
    return x1, StateStms(A=A, B=B, Phi_xx=Pxx, Phi_ux=Pux, Phi_uu=Puu)


def propagate_stms(model, x, u, t0, t1, second_order=True, opts=None):
    """Propagate the nominal state and its first/second-order STMs over [t0, t1].

    For discrete-flow models the closed-form flow map is used directly (the
    registered flows are linear, so second-order tensors are zero).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n_x, n_u = model.n_x, model.n_u
    if t1 < t0:
        raise ConfigError("propagate_stms requires t1 >= t0")
    if t1 == t0:
        stms = StateStms(A=np.eye(n_x), B=np.zeros((n_x, n_u)))
        if second_order:
            stms.Phi_xx = np.zeros((n_x, n_x, n_x))
            stms.Phi_ux = np.zeros((n_x, n_u, n_x))
            stms.Phi_uu = np.zeros((n_x, n_u, n_u))
        return x.copy(), stms

    if model.kind == "discrete":
        x1, A, B = model.flow(x, u, t1 - t0)
        stms = StateStms(A=np.asarray(A, dtype=float), B=np.asarray(B, dtype=float))
        if second_order:
            stms.Phi_xx = np.zeros((n_x, n_x, n_x))
            stms.Phi_ux = np.zeros((n_x, n_u, n_x))
            stms.Phi_uu = np.zeros((n_x, n_u, n_u))
        return np.asarray(x1, dtype=float), stms

    opts = opts or model.integrator
    run = _stm_kernel(model, second_order, opts)
    yflat, status, t_reached = run(x, u, t0, t1)
    _raise_for_status(int(status), float(t_reached), opts.max_steps)
    return _unpack_stms(yflat, n_x, n_u, second_order)


@dataclass
class ModelDerivatives:
    """Point Jacobians/Hessians of the model callables.

    Drift derivatives are None for discrete-flow models; observation-related
    fields are None when no epoch is given.
    """

    f: np.ndarray = None
    f_x: np.ndarray = None
    f_u: np.ndarray = None
    f_xx: np.ndarray = None
    f_ux: np.ndarray = None
    f_uu: np.ndarray = None
    G: np.ndarray = None
    dG_dx: np.ndarray = None  # (n_x, n_w, n_x)
    dG_du: np.ndarray = None  # (n_x, n_w, n_u)
    h: np.ndarray = None
    C: np.ndarray = None  # (n_y, n_x)
    h_xx: np.ndarray = None  # (n_y, n_x, n_x)
    Gy: np.ndarray = None
    dGy_dx: np.ndarray = None  # (n_y, n_y, n_x)
    W_bar: np.ndarray = None
    dW_dx: np.ndarray = None  # (n_y, n_y, n_x)


def _md_kernels(model, epoch):
    key = ("model_derivs", epoch)
    if key in model._cache:
        return model._cache[key]
    kernels = {}
    if model.kind == "continuous":
        drift = model.drift

        @jax.jit
        def drift_derivs(x, u, t):
            return (drift(x, u, t),
                    jax.jacfwd(drift, 0)(x, u, t),
                    jax.jacfwd(drift, 1)(x, u, t),
                    jax.jacfwd(jax.jacfwd(drift, 0), 0)(x, u, t),
                    jax.jacfwd(jax.jacfwd(drift, 1), 0)(x, u, t),
                    jax.jacfwd(jax.jacfwd(drift, 1), 1)(x, u, t))

        kernels["drift"] = drift_derivs
    noise = model.noise_sqrt

    @jax.jit
    def noise_derivs(x, u):
        return (noise(x, u),
                jax.jacfwd(noise, 0)(x, u),
                jax.jacfwd(noise, 1)(x, u))

    kernels["noise"] = noise_derivs
    if epoch is not None:
        obs = model.observation(epoch)

        @jax.jit
        def obs_derivs(x, t):
            return (obs.h(x, t),
                    jax.jacfwd(obs.h)(x, t),
                    jax.jacfwd(jax.jacfwd(obs.h))(x, t),
                    obs.noise_sqrt(x, t),
                    jax.jacfwd(obs.noise_sqrt)(x, t))

        kernels["obs"] = obs_derivs
    model._cache[key] = kernels
    return kernels


def model_derivatives(model, x, u, epoch=None, t=0.0):
    """Evaluate model Jacobians/Hessians at (x, u) via forward-mode duals.

    ``epoch`` selects an observation model id; W_bar = (G_y G_y^T)^{-1} and
    its state derivative is assembled with the product rule and the matrix
    inverse derivative.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    out = ModelDerivatives()
    kernels = _md_kernels(model, epoch)

    if model.kind == "continuous":
        vals = kernels["drift"](x, u, t)
        out.f, out.f_x, out.f_u, out.f_xx, out.f_ux, out.f_uu = map(np.asarray, vals)

    out.G, out.dG_dx, out.dG_du = map(np.asarray, kernels["noise"](x, u))

    if epoch is not None:
        out.h, out.C, out.h_xx, out.Gy, out.dGy_dx = map(
            np.asarray, kernels["obs"](x, t))
        W_inv = out.Gy @ out.Gy.T
        try:
            out.W_bar = sym(np.linalg.inv(W_inv))
        except np.linalg.LinAlgError:
            raise NoiseCovarianceSingularError(
                f"observation noise covariance singular at epoch {epoch}"
            ) from None
        if not np.all(np.isfinite(out.W_bar)) or np.linalg.cond(W_inv) > 1e15:
            raise NoiseCovarianceSingularError(
                f"observation noise covariance singular at epoch {epoch}"
            )
        dWinv = np.einsum("abc,db->adc", out.dGy_dx, out.Gy) + \
            np.einsum("ab,dbc->adc", out.Gy, out.dGy_dx)
        out.dW_dx = -np.einsum("ae,efc,fb->abc", out.W_bar, dWinv, out.W_bar)
    return out


@dataclass
class ProcessNoiseDiscretization:
    """Trapezoidal discrete process-noise square root and covariance."""

    Gbar: np.ndarray  # (n_x, 2 n_w)
    Qbar: np.ndarray  # (n_x, n_x)


def discretize_process_noise(model, x0, x1, u, A, dt):
    """Trapezoidal-rule discrete process noise over one interval.

    Gbar = sqrt(dt/2) [A G(x0,u) | G(x1,u)], Qbar = Gbar Gbar^T.
    """
    if dt <= 0:
        raise ConfigError("discretize_process_noise requires dt > 0")
    G0 = np.asarray(model.noise_sqrt(np.asarray(x0, float), np.asarray(u, float)))
    G1 = np.asarray(model.noise_sqrt(np.asarray(x1, float), np.asarray(u, float)))
    Gbar = np.sqrt(dt / 2.0) * np.hstack([np.asarray(A) @ G0, G1])
    return ProcessNoiseDiscretization(Gbar=Gbar, Qbar=sym(Gbar @ Gbar.T))


def lyapunov_process_noise(model, x0, u, t0, dt, opts=None):
    """Q(t0+dt) from integrating Qdot = A Q + Q A^T + G G^T along the arc.

    The nominal state is integrated jointly so the coefficients follow the
    arc; Q(t0) = 0. Returns the symmetrized covariance.
    """
    if model.kind != "continuous":
        raise ConfigError("lyapunov_process_noise applies to continuous models")
    if dt <= 0:
        raise ConfigError("lyapunov_process_noise requires dt > 0")
    opts = opts or model.integrator
    n = model.n_x
    key = "lyap_eval"
    if key not in model._cache:
        def point(x, uu, t):
            Ab = jax.jacfwd(model.drift, 0)(x, uu, t)
            G = model.noise_sqrt(x, uu)
            return model.drift(x, uu, t), Ab, G @ G.T
        model._cache[key] = jax.jit(point)
    point = model._cache[key]
    u = np.asarray(u, dtype=float)

    def rhs(t, y):
        x = y[:n]
        Q = y[n:].reshape(n, n)
        f, Ab, GG = point(x, u, t)
        dQ = np.asarray(Ab) @ Q + Q @ np.asarray(Ab).T + np.asarray(GG)
        return np.concatenate([np.asarray(f), dQ.ravel()])

    y0 = np.concatenate([np.asarray(x0, dtype=float), np.zeros(n * n)])
    y1 = ode.integrate(rhs, y0, t0, t0 + dt, opts)
    return sym(y1[n:].reshape(n, n))
