"""Benchmark scenario models: light-dark, Earth-Mars transfer, CR3BP halo transfer.

All models are built in nondimensional units; parameter tables are transcribed
in physical units and converted here. Observation callables take (x, t) so
that moving-reference observers (the Earth ephemeris) fit the same interface.
"""

from dataclasses import dataclass, replace

import jax.numpy as jnp
import numpy as np

from .errors import ConfigError
from .models import ObservationModel, Scaling, ScenarioModel, StageSchedule

AU_KM = 1.49597870e8
DAY_S = 86400.0

# Earth-Moon CR3BP constants (mass parameter exposed via overrides).
CR3BP_MU = 0.012150584269940
CR3BP_LENGTH_KM = 384400.0
CR3BP_GM_TOTAL = 403503.236  # km^3/s^2, Earth + Moon
CR3BP_TIME_S = float(np.sqrt(CR3BP_LENGTH_KM**3 / CR3BP_GM_TOTAL))

SUN_GM = 1.3271e11  # km^3/s^2 (Table value)


@dataclass(frozen=True)
class GatesParams:
    """Thrust execution-error model parameters.

    sigma_ap/sigma_res share the acceleration units of the control the model
    is evaluated with; sigma_pt is in degrees; sigma_sh is a fraction;
    eps_u regularizes the thrust direction at zero commanded thrust and has
    (acceleration unit)^2.
    """

    sigma_ap: float
    sigma_res: float
    sigma_pt: float
    sigma_sh: float
    eps_u: float

    def scaled(self, accel_unit):
        """Convert mm/s^2-based parameters to multiples of ``accel_unit`` (mm/s^2)."""
        return GatesParams(
            sigma_ap=self.sigma_ap / accel_unit,
            sigma_res=self.sigma_res / accel_unit,
            sigma_pt=self.sigma_pt,
            sigma_sh=self.sigma_sh,
            eps_u=self.eps_u / accel_unit**2,
        )


def gates_noise_sqrt(u, params):
    """Square-root execution-error intensity aligned with the commanded thrust.

    M = sigma_perp I + (sigma_par - sigma_perp) z z^T with z the regularized
    thrust direction; valid for 2-D and 3-D controls.
    """
    u = jnp.asarray(u)
    nrm2 = u @ u
    sig_pt = jnp.deg2rad(params.sigma_pt)
    s_perp = jnp.sqrt(params.sigma_ap**2 + sig_pt**2 * nrm2)
    s_par = jnp.sqrt(params.sigma_res**2 + params.sigma_sh**2 * nrm2)
    z = u / jnp.sqrt(nrm2 + params.eps_u)
    return s_perp * jnp.eye(u.shape[0]) + (s_par - s_perp) * jnp.outer(z, z)


def _lifted_gates(params, n_dim):
    def noise_sqrt(x, u):
        M = gates_noise_sqrt(u, params)
        return jnp.vstack([jnp.zeros((n_dim, n_dim)), M])
    return noise_sqrt


def _range_rate_obs(r_e, v_e, sigma_r, sigma_v, n_dim):
    """Range / range-rate observation of the state relative to an observer.

    ``r_e``/``v_e`` are callables of time returning the observer ephemeris.
    """
    R = jnp.diag(jnp.array([sigma_r, sigma_v]))

    def h(x, t):
        rho_r = x[:n_dim] - r_e(t)
        rho_v = x[n_dim:2 * n_dim] - v_e(t)
        rng = jnp.sqrt(rho_r @ rho_r)
        return jnp.stack([rng, rho_r @ rho_v / rng])

    def noise_sqrt(x, t):
        return R

    return ObservationModel(n_y=2, h=h, noise_sqrt=noise_sqrt)


def make_lightdark(n_stages=50, dt=0.2, sigma_p=1e-6, sigma_v=1e-6,
                   landmark=(5.0, 5.0), sigma_y0=1e-4, sigma_y1=1e-2,
                   x0=(0.0, 0.0, 0.0, 0.0), x_f=(10.0, 0.0, 0.0, 0.0),
                   sigma_r0=4e-2, sigma_v0=1e-2, sigma_rf=2e-4, sigma_vf=1e-2):
    """Double-integrator scenario with observation noise growing away from a landmark.

    The dynamics are registered as an exact discrete linear flow, so the
    state transition matrices are closed form and the process noise is the
    per-step discrete covariance G G^T.
    """
    lm = jnp.asarray(landmark, dtype=float)

    def flow(x, u, dt_):
        A = np.eye(4)
        A[0, 2] = A[1, 3] = dt_
        B = np.zeros((4, 2))
        B[0, 0] = B[1, 1] = 0.5 * dt_**2
        B[2, 0] = B[3, 1] = dt_
        return A @ np.asarray(x) + B @ np.asarray(u), A, B

    G = np.diag([sigma_p, sigma_p, sigma_v, sigma_v])

    def noise_sqrt(x, u):
        return jnp.asarray(G)

    def h(x, t):
        return x[:2]

    def obs_noise(x, t):
        r = jnp.sqrt((x[0] - lm[0]) ** 2 + (x[1] - lm[1]) ** 2)
        return (sigma_y0 + r * sigma_y1) * jnp.eye(2)

    schedule = StageSchedule.uniform(0.0, n_stages, dt, n_obs=1,
                                     last_at_maneuver=True)
    sr0, sv0 = sigma_r0, sigma_v0
    P0 = np.diag([sr0**2, sr0**2, sv0**2, sv0**2])
    return ScenarioModel(
        name="lightdark", n_x=4, n_u=2, n_w=4, kind="discrete",
        schedule=schedule,
        observations={0: ObservationModel(n_y=2, h=h, noise_sqrt=obs_noise)},
        noise_sqrt=noise_sqrt, flow=flow,
        scaling=Scaling(),
        x_bar0=np.asarray(x0, float), P_tilde0=P0.copy(), P_hat0=P0.copy(),
        x_f=np.asarray(x_f, float),
        P_f=np.diag([sigma_rf**2, sigma_rf**2, sigma_vf**2, sigma_vf**2]),
        extras={"landmark": np.asarray(landmark, float),
                "sigma_y0": sigma_y0, "sigma_y1": sigma_y1},
    )


_SHUTOFF_CASES = {"low": 1.0, "medium": 3.0, "high": 4.0}


def make_earth_mars(shutoff_case="high", length_scale_km=1e8, time_scale_s=1e7,
                    earth_phase_deg=None, mu_sun=SUN_GM):
    """Planar two-body Earth-to-Mars transfer with Gates noise and radiometric tracking.

    Earth's planar ephemeris is a circular heliocentric orbit at 1 AU, phased
    (configurable) so the spacecraft initial state sits near the Earth at t0.
    """
    if shutoff_case not in _SHUTOFF_CASES:
        raise ConfigError(f"unknown shutoff case {shutoff_case!r}")
    scaling = Scaling(length_km=length_scale_km, time_s=time_scale_s)
    mu_nd = mu_sun * time_scale_s**2 / length_scale_km**3

    def drift(x, u, t):
        r = x[:2]
        v = x[2:]
        r3 = (r @ r) ** 1.5
        return jnp.concatenate([v, -mu_nd * r / r3 + u])

    gates = GatesParams(sigma_ap=1e-3, sigma_res=1e-3, sigma_pt=0.5,
                        sigma_sh=_SHUTOFF_CASES[shutoff_case], eps_u=1e-8)
    gates_nd = gates.scaled(scaling.accel_mms2)

    # Table 3 states (AU, km/s) in nondimensional units.
    x0 = np.array([-0.94048 * AU_KM, -0.34502 * AU_KM, 0.0, 0.0]) / length_scale_km
    x0[2:] = np.array([9.7746, -29.078]) / scaling.velocity_kms
    xf = np.array([-1.1543 * AU_KM, 1.1829 * AU_KM, 0.0, 0.0]) / length_scale_km
    xf[2:] = np.array([-16.427, -14.861]) / scaling.velocity_kms

    a_e = AU_KM / length_scale_km
    omega_e = float(np.sqrt(mu_nd / a_e**3))
    if earth_phase_deg is None:
        theta0 = float(np.arctan2(x0[1], x0[0]))
    else:
        theta0 = np.deg2rad(earth_phase_deg)

    def r_e(t):
        th = theta0 + omega_e * t
        return a_e * jnp.stack([jnp.cos(th), jnp.sin(th)])

    def v_e(t):
        th = theta0 + omega_e * t
        return a_e * omega_e * jnp.stack([-jnp.sin(th), jnp.cos(th)])

    sigma_range = 1e2 / length_scale_km
    sigma_rate = 1e-3 / scaling.velocity_kms  # 1 m/s
    obs = _range_rate_obs(r_e, v_e, sigma_range, sigma_rate, 2)

    obs_dt = 2.9066 * DAY_S / time_scale_s
    schedule = StageSchedule.uniform(0.0, 40, 3 * obs_dt, n_obs=3,
                                     last_at_maneuver=True)
    sr0 = 10.0 / length_scale_km
    sv0 = 0.1 / scaling.velocity_kms
    P0 = np.diag([sr0**2, sr0**2, sv0**2, sv0**2])
    srf = 3.12e5 / length_scale_km
    svf = 0.1 / scaling.velocity_kms
    return ScenarioModel(
        name=f"earth_mars_{shutoff_case}", n_x=4, n_u=2, n_w=2,
        kind="continuous", schedule=schedule, observations={0: obs},
        noise_sqrt=_lifted_gates(gates_nd, 2), drift=drift, scaling=scaling,
        x_bar0=x0, P_tilde0=P0.copy(), P_hat0=P0.copy(), x_f=xf,
        P_f=np.diag([srf**2, srf**2, svf**2, svf**2]),
        extras={"gates": gates_nd, "u_max_nd": 1.0 / scaling.accel_mms2,
                "earth_phase_rad": theta0, "shutoff_case": shutoff_case},
    )


def cr3bp_accel(r, v, mu):
    """Rotating-frame CR3BP acceleration (jax-traceable)."""
    rho1 = jnp.sqrt((r[0] + mu) ** 2 + r[1] ** 2 + r[2] ** 2)
    rho2 = jnp.sqrt((r[0] - 1 + mu) ** 2 + r[1] ** 2 + r[2] ** 2)
    ax = (2 * v[1] + r[0] - (1 - mu) * (r[0] + mu) / rho1**3
          - mu * (r[0] - 1 + mu) / rho2**3)
    ay = -2 * v[0] + r[1] - (1 - mu) * r[1] / rho1**3 - mu * r[1] / rho2**3
    az = -(1 - mu) * r[2] / rho1**3 - mu * r[2] / rho2**3
    return jnp.stack([ax, ay, az])


def jacobi_constant(x, mu):
    """Jacobi integral of the uncontrolled CR3BP."""
    r, v = np.asarray(x[:3]), np.asarray(x[3:])
    rho1 = np.sqrt((r[0] + mu) ** 2 + r[1] ** 2 + r[2] ** 2)
    rho2 = np.sqrt((r[0] - 1 + mu) ** 2 + r[1] ** 2 + r[2] ** 2)
    U = 0.5 * (r[0] ** 2 + r[1] ** 2) + (1 - mu) / rho1 + mu / rho2
    return float(2 * U - v @ v)


def make_cr3bp(mu=CR3BP_MU, length_km=CR3BP_LENGTH_KM, time_s=CR3BP_TIME_S,
               n_stages=120, dt_hours=3.8):
    """Earth-Moon L2-to-L1 halo transfer with 3-D Gates noise and Earth tracking."""
    scaling = Scaling(length_km=length_km, time_s=time_s)

    def drift(x, u, t):
        return jnp.concatenate([x[3:], cr3bp_accel(x[:3], x[3:], mu) + u])

    gates = GatesParams(sigma_ap=1e-3, sigma_res=1e-3, sigma_pt=0.5,
                        sigma_sh=1.0, eps_u=7.4e-8)
    gates_nd = gates.scaled(scaling.accel_mms2)

    r_earth = jnp.array([-mu, 0.0, 0.0])

    def r_e(t):
        return r_earth

    def v_e(t):
        return jnp.zeros(3)

    sigma_range = 1e2 / length_km
    sigma_rate = 1e-3 / scaling.velocity_kms
    obs = _range_rate_obs(r_e, v_e, sigma_range, sigma_rate, 3)

    dt_nd = dt_hours * 3600.0 / time_s
    schedule = StageSchedule.uniform(0.0, n_stages, dt_nd, n_obs=1,
                                     last_at_maneuver=True)
    x0 = np.array([1.16, 0.0, -0.122697, 0.0, -0.207128, 0.0])
    xf = np.array([0.85, 0.0, 0.173890, 0.0, 0.262114, 0.0])
    sr0 = 10.0 / length_km
    sv0 = 1e-4 / scaling.velocity_kms  # 0.1 m/s
    P0 = np.diag([sr0**2] * 3 + [sv0**2] * 3)
    return ScenarioModel(
        name="cr3bp", n_x=6, n_u=3, n_w=3, kind="continuous",
        schedule=schedule, observations={0: obs},
        noise_sqrt=_lifted_gates(gates_nd, 3), drift=drift, scaling=scaling,
        x_bar0=x0, P_tilde0=P0.copy(), P_hat0=P0.copy(), x_f=xf, P_f=None,
        extras={"gates": gates_nd, "mu": mu,
                "u_max_nd": 0.75 / scaling.accel_mms2},
    )


def analysis_indices(solution):
    """Per-stage nonlinearity (FTLE-style) and cumulative information indices.

    Nonlinearity: log sqrt(||Phi_A^T Phi_A||) / stage duration, with Phi_A the
    nominal-state STM across the stage. Information: log det of the initial
    information matrix plus the accumulated pullbacks C^T W C through the STM
    chain at every observation epoch up to and including stage k; -inf when
    the accumulated matrix is singular.
    """
    from . import sensitivities as sens

    model = solution.model
    schedule = model.schedule
    n_x = model.n_x
    Phi_to_start = np.eye(n_x)
    info = np.linalg.inv(model.P_tilde0)
    rows = []
    for k in range(schedule.n_stages):
        ctrl = solution.controls[k]
        x = np.asarray(solution.states[k].x_bar, float)
        Phi_stage = np.eye(n_x)
        for interval in schedule.intervals(k):
            x1, stms = sens.propagate_stms(model, x, ctrl.u_bar, interval.t0,
                                           interval.t1, second_order=False)
            Phi_stage = stms.A @ Phi_stage
            Phi_chain = stms.A @ Phi_to_start
            if interval.obs_id is not None:
                md = sens.model_derivatives(model, x1, ctrl.u_bar,
                                            epoch=interval.obs_id, t=interval.t1)
                CP = md.C @ Phi_chain
                info = info + CP.T @ md.W_bar @ CP
            x = x1
            Phi_to_start = Phi_chain
        dt_k = schedule.stage_duration(k)
        nonlin = np.log(np.sqrt(np.linalg.norm(Phi_stage.T @ Phi_stage, 2))) / dt_k
        sign, logdet = np.linalg.slogdet(info)
        info_idx = logdet if sign > 0 else -np.inf
        rows.append((k, float(schedule.t_nodes[k + 1]), float(nonlin), float(info_idx)))
    return rows
