"""Belief-state transition model over intermediate intervals.

The belief state is (x_bar, P_tilde, P_hat): nominal state, estimation-error
covariance, state-estimate covariance. One intermediate transition propagates
over [t_{k,j}, t_{k,j+1}] and, when an observation is scheduled at the
interval end, applies the information-form measurement update

    P_tilde+ = [(A P_tilde A^T + Qbar)^{-1} + S]^{-1},  S = C^T Wbar C

together with the state-estimate covariance propagation

    P_hat+ = Acl P_hat Acl^T + F Pxi F^T,  Acl = A + B K,  F = P_tilde+ C^T Wbar D.

Vectorization is column-major throughout; the augmented state is
X = [x_bar, vec(P_tilde), vec(P_hat)] and the augmented control
U = [u_bar, vec(K)].
"""

from dataclasses import dataclass

import numpy as np

from . import sensitivities as sens
from .errors import ConfigError
from .linalg import min_eigval, spd_inverse, sym
from .models import Interval


def vec(M):
    """Column-major vec that works for numpy and jax arrays alike."""
    return M.T.ravel()


def unvec(v, rows, cols=None):
    cols = rows if cols is None else cols
    return v.reshape(cols, rows).T


@dataclass
class BeliefState:
    """Augmented belief state at one epoch."""

    x_bar: np.ndarray
    P_tilde: np.ndarray
    P_hat: np.ndarray

    def pack(self):
        return np.concatenate([
            np.asarray(self.x_bar, float),
            vec(np.asarray(self.P_tilde, float)),
            vec(np.asarray(self.P_hat, float)),
        ])

    @classmethod
    def unpack(cls, X, n_x):
        X = np.asarray(X, float)
        x = X[:n_x]
        Pt = unvec(X[n_x:n_x + n_x**2], n_x)
        Ph = unvec(X[n_x + n_x**2:], n_x)
        return cls(x_bar=x, P_tilde=Pt, P_hat=Ph)

    def total_covariance(self):
        return self.P_tilde + self.P_hat

    def validate(self, tol=1e-9):
        for name, P in (("P_tilde", self.P_tilde), ("P_hat", self.P_hat)):
            if np.max(np.abs(P - P.T)) > tol * max(1.0, np.max(np.abs(P))):
                raise ConfigError(f"{name} is not symmetric")
            if min_eigval(P) < -tol * max(1.0, float(np.trace(P))):
                raise ConfigError(f"{name} is not positive semidefinite")


@dataclass
class AugmentedControl:
    """Per-stage decision variable: nominal control and feedback gain."""

    u_bar: np.ndarray
    K: np.ndarray

    def pack(self):
        return np.concatenate([
            np.asarray(self.u_bar, float),
            vec(np.asarray(self.K, float)),
        ])

    @classmethod
    def unpack(cls, U, n_u, n_x):
        U = np.asarray(U, float)
        return cls(u_bar=U[:n_u], K=unvec(U[n_u:], n_u, n_x))

    @classmethod
    def zeros(cls, n_u, n_x):
        return cls(u_bar=np.zeros(n_u), K=np.zeros((n_u, n_x)))


@dataclass
class ObservationLinearization:
    """Observation-residual linearization at an epoch (nominal evaluation)."""

    C: np.ndarray
    W_bar: np.ndarray
    G_y_bar: np.ndarray
    D: np.ndarray
    S: np.ndarray
    P_xi: np.ndarray


def observe_linearize(model, obs_id, x, P_tilde_minus, t=0.0):
    """Build the observation linearization blocks of the residual model."""
    md = sens.model_derivatives(model, x, np.zeros(model.n_u), epoch=obs_id, t=t)
    C, Gy, W = md.C, md.Gy, md.W_bar
    n_y = C.shape[0]
    D = np.hstack([C, Gy])
    P_xi = np.zeros((model.n_x + n_y, model.n_x + n_y))
    P_xi[: model.n_x, : model.n_x] = P_tilde_minus
    P_xi[model.n_x:, model.n_x:] = np.eye(n_y)
    return ObservationLinearization(C=C, W_bar=W, G_y_bar=Gy, D=D,
                                    S=sym(C.T @ W @ C), P_xi=P_xi)


@dataclass
class IntervalFlow:
    """Frozen flow data for one intermediate interval along a trajectory."""

    x0: np.ndarray
    u0: np.ndarray
    x1: np.ndarray
    A: np.ndarray
    B: np.ndarray
    Qbar: np.ndarray
    dt: float
    t1: float
    Phi_xx: np.ndarray = None
    Phi_ux: np.ndarray = None
    Phi_uu: np.ndarray = None


def _interval_flow(model, interval, x, u, opts, second_order):
    n_x, n_u = model.n_x, model.n_u
    if interval.zero_length:
        zeros = (np.zeros((n_x, n_x, n_x)), np.zeros((n_x, n_u, n_x)),
                 np.zeros((n_x, n_u, n_u))) if second_order else (None,) * 3
        return IntervalFlow(
            x0=x, u0=u, x1=x.copy(), A=np.eye(n_x), B=np.zeros((n_x, n_u)),
            Qbar=np.zeros((n_x, n_x)), dt=0.0, t1=interval.t1,
            Phi_xx=zeros[0], Phi_ux=zeros[1], Phi_uu=zeros[2],
        )
    x1, stms = sens.propagate_stms(model, x, u, interval.t0, interval.t1,
                                   second_order=second_order, opts=opts)
    if model.kind == "discrete":
        G = np.asarray(model.noise_sqrt(x, u))
        Qbar = sym(G @ G.T)
    else:
        Qbar = sens.discretize_process_noise(model, x, x1, u, stms.A, interval.dt).Qbar
    return IntervalFlow(x0=x, u0=u, x1=x1, A=stms.A, B=stms.B, Qbar=Qbar,
                        dt=interval.dt, t1=interval.t1, Phi_xx=stms.Phi_xx,
                        Phi_ux=stms.Phi_ux, Phi_uu=stms.Phi_uu)


def _apply_interval(model, bstate, control, interval, flow):
    """Covariance propagation + optional measurement update for one interval."""
    A, B, Qbar = flow.A, flow.B, flow.Qbar
    P_tilde_minus = sym(A @ bstate.P_tilde @ A.T + Qbar)
    A_cl = A + B @ control.K
    if interval.obs_id is not None:
        lin = observe_linearize(model, interval.obs_id, flow.x1, P_tilde_minus,
                                t=interval.t1)
        info_prior = spd_inverse(P_tilde_minus, name="prior estimation-error covariance")
        P_tilde_plus = sym(spd_inverse(info_prior + lin.S,
                                       name="posterior information matrix"))
        F = P_tilde_plus @ lin.C.T @ lin.W_bar @ lin.D
        P_hat_plus = sym(A_cl @ bstate.P_hat @ A_cl.T + F @ lin.P_xi @ F.T)
    else:
        P_tilde_plus = P_tilde_minus
        P_hat_plus = sym(A_cl @ bstate.P_hat @ A_cl.T)
    return BeliefState(x_bar=flow.x1, P_tilde=P_tilde_plus, P_hat=P_hat_plus)


def intermediate_transition(bstate, control, interval, model, opts=None):
    """One intermediate belief-state transition (observation at interval end)."""
    flow = _interval_flow(model, interval, np.asarray(bstate.x_bar, float),
                          np.asarray(control.u_bar, float, ), opts, False)
    return _apply_interval(model, bstate, control, interval, flow)


def stage_pass(bstate, control, k, schedule, model, opts=None, second_order=False):
    """Propagate a full stage, returning the trace and per-interval flow data.

    The trace holds the belief state after each intermediate transition (the
    last entry is the stage-end state); the input state is not included.
    """
    intervals = schedule.intervals(k)
    trace, flows = [], []
    cur = bstate
    for interval in intervals:
        flow = _interval_flow(model, interval, np.asarray(cur.x_bar, float),
                              np.asarray(control.u_bar, float), opts, second_order)
        cur = _apply_interval(model, cur, control, interval, flow)
        trace.append(cur)
        flows.append(flow)
    return cur, trace, flows


def stage_transition(bstate, control, k, schedule, model, opts=None):
    """Stage-to-stage belief transition: sequential intermediate transitions."""
    final, trace, _ = stage_pass(bstate, control, k, schedule, model, opts)
    return final, trace


@dataclass
class StageSensitivities:
    """First/second-order derivatives of a stage transition w.r.t. (X, U).

    Second-order tensors drop contributions that would require third-order
    STMs of the nominal flow; they are None unless requested.
    """

    phi1: np.ndarray  # (n_X, n_X)
    phiU: np.ndarray  # (n_X, n_U)
    F_XX: np.ndarray = None  # (n_X, n_X, n_X)
    F_UX: np.ndarray = None  # (n_X, n_U, n_X)
    F_UU: np.ndarray = None  # (n_X, n_U, n_U)

    def contract_second(self, w):
        """w . F_zz as a dense (n_X + n_U)^2 matrix."""
        wXX = np.einsum("i,iab->ab", w, self.F_XX)
        wUX = np.einsum("i,iab->ab", w, self.F_UX)
        wUU = np.einsum("i,iab->ab", w, self.F_UU)
        top = np.hstack([wXX, wUX.T])
        bottom = np.hstack([wUX, wUU])
        return np.vstack([top, bottom])


def stage_sensitivities(bstate, control, k, schedule, model, second_order=True,
                        opts=None):
    """Assemble stage-transition derivatives from STMs and model derivatives.

    Flow derivatives enter through the first/second-order STMs of the nominal
    dynamics; model-level derivatives are pushed through with forward-mode
    duals, chained across the intermediate intervals of the stage.
    """
    from . import stagemap

    intervals = schedule.intervals(k)
    _, _, flows = stage_pass(bstate, control, k, schedule, model, opts=opts,
                             second_order=True)
    kernel = stagemap.get_kernel(model, intervals)
    data = stagemap.stack_flows(model, flows)
    X = bstate.pack()
    U = control.pack()
    FX, FU = kernel.jacobian(X, U, data)
    out = StageSensitivities(phi1=FX, phiU=FU)
    if second_order:
        out.F_XX, out.F_UX, out.F_UU = kernel.full_second(X, U, data)
    return out
