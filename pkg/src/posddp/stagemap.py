"""Stage-transition derivative kernel.

The stage map is rebuilt as a function of the packed augmented state/control
around a frozen trajectory: flow endpoints and STMs enter through their
second-order Taylor data (so differentiating the map twice never requires
third-order STMs, which are the terms the covariance-derivative assembly
deliberately drops), while the model callables (G_x, h, G_y) are evaluated
exactly and differentiated with forward-mode duals. Forward-mode Jacobians of
this map therefore reproduce the analytic interval derivatives chained across
the intermediate epochs of a stage.
"""

import jax
import jax.numpy as jnp
import numpy as np

from .belief import IntervalFlow  # noqa: F401  (type of stack_flows input)


def _structure(intervals):
    return tuple((iv.zero_length, iv.obs_id) for iv in intervals)


def get_kernel(model, intervals):
    """Compiled kernel for a stage with the given interval structure (cached)."""
    key = ("stagemap", _structure(intervals))
    if key not in model._cache:
        model._cache[key] = StageMapKernel(model, _structure(intervals))
    return model._cache[key]


def stack_flows(model, flows):
    """Stack per-interval flow data into the kernel's pytree layout."""
    n_x, n_u = model.n_x, model.n_u
    for f in flows:
        if f.Phi_xx is None:
            raise ValueError("stage data requires second-order flow tensors")
    return {
        "x0": np.stack([f.x0 for f in flows]),
        "u0": np.stack([f.u0 for f in flows]),
        "x1": np.stack([f.x1 for f in flows]),
        "A": np.stack([f.A for f in flows]),
        "B": np.stack([f.B for f in flows]),
        "Pxx": np.stack([f.Phi_xx for f in flows]),
        "Pux": np.stack([f.Phi_ux for f in flows]),
        "Puu": np.stack([f.Phi_uu for f in flows]),
        "dt": np.array([f.dt for f in flows]),
        "t1": np.array([f.t1 for f in flows]),
    }


def _spd_inv(M):
    L = jnp.linalg.cholesky(M)
    Linv = jax.scipy.linalg.solve_triangular(L, jnp.eye(M.shape[0]), lower=True)
    return Linv.T @ Linv


class StageMapKernel:
    """Jitted stage transition plus derivative extraction around frozen flows."""

    def __init__(self, model, structure):
        self.model = model
        self.structure = structure
        n_x, n_u = model.n_x, model.n_u
        n_X, n_U = model.n_X, model.n_U
        self.n_X, self.n_U = n_X, n_U
        self.n_z = n_X + n_U
        continuous = model.kind == "continuous"
        noise_sqrt = model.noise_sqrt
        obs_models = {oid: model.observation(oid) for _, oid in structure
                      if oid is not None}

        def unpack_X(X):
            x = X[:n_x]
            Pt = X[n_x:n_x + n_x * n_x].reshape(n_x, n_x).T
            Ph = X[n_x + n_x * n_x:].reshape(n_x, n_x).T
            return x, Pt, Ph

        def unpack_U(U):
            return U[:n_u], U[n_u:].reshape(n_x, n_u).T

        def pack_X(x, Pt, Ph):
            return jnp.concatenate([x, Pt.T.ravel(), Ph.T.ravel()])

        def step(spec, X, U, d):
            zero_length, obs_id = spec
            x, Pt, Ph = unpack_X(X)
            u, K = unpack_U(U)
            if zero_length:
                x1 = x
                A = jnp.eye(n_x)
                B = jnp.zeros((n_x, n_u))
                Qbar = jnp.zeros((n_x, n_x))
            else:
                dx = x - d["x0"]
                du = u - d["u0"]
                A = (d["A"] + jnp.einsum("ibc,c->ib", d["Pxx"], dx)
                     + jnp.einsum("imb,m->ib", d["Pux"], du))
                B = (d["B"] + jnp.einsum("imc,c->im", d["Pux"], dx)
                     + jnp.einsum("imn,n->im", d["Puu"], du))
                x1 = (d["x1"] + d["A"] @ dx + d["B"] @ du
                      + 0.5 * jnp.einsum("iab,a,b->i", d["Pxx"], dx, dx)
                      + jnp.einsum("imb,m,b->i", d["Pux"], du, dx)
                      + 0.5 * jnp.einsum("imn,m,n->i", d["Puu"], du, du))
                if continuous:
                    G0 = noise_sqrt(x, u)
                    G1 = noise_sqrt(x1, u)
                    AG0 = A @ G0
                    Qbar = 0.5 * d["dt"] * (AG0 @ AG0.T + G1 @ G1.T)
                else:
                    Gd = noise_sqrt(x, u)
                    Qbar = Gd @ Gd.T
            Ptm = A @ Pt @ A.T + Qbar
            Acl = A + B @ K
            if obs_id is not None:
                obs = obs_models[obs_id]
                C = jax.jacfwd(obs.h)(x1, d["t1"])
                Gy = obs.noise_sqrt(x1, d["t1"])
                Winv = Gy @ Gy.T
                W = _spd_inv(Winv)
                S = C.T @ W @ C
                Ptp = _spd_inv(_spd_inv(Ptm) + S)
                F = Ptp @ C.T @ W
                Php = Acl @ Ph @ Acl.T + F @ (C @ Ptm @ C.T + Winv) @ F.T
            else:
                Ptp = Ptm
                Php = Acl @ Ph @ Acl.T
            Ptp = 0.5 * (Ptp + Ptp.T)
            Php = 0.5 * (Php + Php.T)
            return pack_X(x1, Ptp, Php)

        def transition(X, U, data):
            out = X
            for j, spec in enumerate(structure):
                d = {k: v[j] for k, v in data.items()}
                out = step(spec, out, U, d)
            return out

        def zfun(z, data):
            return transition(z[:n_X], z[n_X:], data)

        def vhp(z, data, w):
            def grad_wf(zz):
                return jax.vjp(lambda q: zfun(q, data), zz)[1](w)[0]
            return jax.jacfwd(grad_wf)(z)

        self._transition = jax.jit(transition)
        self._jac = jax.jit(jax.jacfwd(transition, argnums=(0, 1)))
        self._jac_batch = jax.jit(jax.vmap(jax.jacfwd(transition, argnums=(0, 1)),
                                           in_axes=(0, 0, 0)))
        self._vhp = jax.jit(vhp)
        self._full2 = jax.jit(jax.jacfwd(jax.jacfwd(zfun)))

    def transition(self, X, U, data):
        return np.asarray(self._transition(X, U, data))

    def jacobian(self, X, U, data):
        FX, FU = self._jac(X, U, data)
        return np.asarray(FX), np.asarray(FU)

    def jacobian_batch(self, Xs, Us, data_batch):
        FX, FU = self._jac_batch(Xs, Us, data_batch)
        return np.asarray(FX), np.asarray(FU)

    def vhp(self, X, U, data, w):
        """w . F_zz contracted over outputs; (n_z, n_z) with z = (X, U)."""
        z = np.concatenate([X, U])
        return np.asarray(self._vhp(z, data, w))

    def full_second(self, X, U, data):
        """Materialized second-order stage tensors (F_XX, F_UX, F_UU)."""
        z = np.concatenate([X, U])
        T = np.asarray(self._full2(z, data))
        n_X = self.n_X
        F_XX = T[:, :n_X, :n_X]
        F_UX = T[:, n_X:, :n_X]
        F_UU = T[:, n_X:, n_X:]
        return F_XX, F_UX, F_UU
