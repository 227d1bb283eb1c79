"""Model containers: dynamics, observation models, and epoch schedules.

Model callables (drift, noise square root, observation map and noise) must be
written with ``jax.numpy`` so the sensitivity machinery can push dual numbers
through them; they remain plain callables on float inputs.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .ode import IntegratorOptions


@dataclass(frozen=True)
class ObservationEpoch:
    """One observation epoch inside a stage."""

    t: float
    obs_id: int
    at_maneuver: bool = False  # coincides with the subsequent maneuver epoch


@dataclass(frozen=True)
class Interval:
    """One intermediate propagation interval; obs applied at the end."""

    t0: float
    t1: float
    obs_id: int | None = None

    @property
    def dt(self):
        return self.t1 - self.t0

    @property
    def zero_length(self):
        return self.t1 == self.t0


class StageSchedule:
    """Maneuver epochs t_k and per-stage observation epochs.

    Epochs within stage k must satisfy t_k < t_{k,1} < ... <= t_{k+1}; the
    last observation of a stage may coincide with the subsequent maneuver
    epoch (flagged ``at_maneuver``), in which case it is realized as a
    zero-length final intermediate interval carrying only the measurement
    update.
    """

    def __init__(self, t_nodes, observations):
        t_nodes = np.asarray(t_nodes, dtype=float)
        if t_nodes.ndim != 1 or len(t_nodes) < 2:
            raise ConfigError("schedule needs at least one stage")
        if np.any(np.diff(t_nodes) <= 0):
            raise ConfigError("maneuver epochs must be strictly increasing")
        if len(observations) != len(t_nodes) - 1:
            raise ConfigError("one observation list required per stage")
        self.t_nodes = t_nodes
        self.observations = [list(obs) for obs in observations]
        for k, obs in enumerate(self.observations):
            t_prev = t_nodes[k]
            for e in obs:
                if not t_prev < e.t <= t_nodes[k + 1]:
                    raise ConfigError(
                        f"observation epoch {e.t} outside stage {k} "
                        f"({t_nodes[k]}, {t_nodes[k + 1]}]"
                    )
                if e.at_maneuver != (e.t == t_nodes[k + 1]):
                    raise ConfigError(
                        f"at_maneuver flag inconsistent for epoch {e.t} in stage {k}"
                    )
                t_prev = e.t
        self._intervals = [self._build_intervals(k) for k in range(self.n_stages)]

    @classmethod
    def uniform(cls, t0, n_stages, stage_dt, n_obs, obs_id=0, last_at_maneuver=True):
        """Equally spaced observation epochs over each stage.

        With ``last_at_maneuver`` the epochs are ``t_k + i*stage_dt/n_obs``
        for i = 1..n_obs, the last one landing on the next maneuver epoch.
        """
        t_nodes = t0 + stage_dt * np.arange(n_stages + 1)
        observations = []
        for k in range(n_stages):
            obs = []
            if n_obs > 0:
                denom = n_obs if last_at_maneuver else n_obs + 1
                for i in range(1, n_obs + 1):
                    t = t_nodes[k] + stage_dt * i / denom
                    at_man = last_at_maneuver and i == n_obs
                    t = t_nodes[k + 1] if at_man else t
                    obs.append(ObservationEpoch(t=t, obs_id=obs_id, at_maneuver=at_man))
            observations.append(obs)
        return cls(t_nodes, observations)

    @property
    def n_stages(self):
        return len(self.t_nodes) - 1

    def stage_duration(self, k):
        return float(self.t_nodes[k + 1] - self.t_nodes[k])

    def intervals(self, k):
        """Intermediate intervals of stage k, in order."""
        return self._intervals[k]

    def _build_intervals(self, k):
        t_start, t_end = self.t_nodes[k], self.t_nodes[k + 1]
        intervals = []
        t_prev = t_start
        trailing = None
        for e in self.observations[k]:
            if e.at_maneuver:
                trailing = e
                break
            intervals.append(Interval(t_prev, e.t, obs_id=e.obs_id))
            t_prev = e.t
        intervals.append(Interval(t_prev, t_end, obs_id=None))
        if trailing is not None:
            intervals.append(Interval(t_end, t_end, obs_id=trailing.obs_id))
        return intervals


@dataclass(frozen=True)
class ObservationModel:
    """Observation map y = h(x) + G_y(x) w with w ~ N(0, I)."""

    n_y: int
    h: callable
    noise_sqrt: callable  # G_y(x) -> (n_y, n_y)


@dataclass(frozen=True)
class Scaling:
    """Nondimensionalization factors (1.0 for natively dimensionless models)."""

    length_km: float = 1.0
    time_s: float = 1.0

    @property
    def velocity_kms(self):
        return self.length_km / self.time_s

    @property
    def accel_kms2(self):
        return self.length_km / self.time_s**2

    @property
    def accel_mms2(self):
        return self.accel_kms2 * 1e6


@dataclass
class ScenarioModel:
    """Callable bundle defining one scenario in nondimensional units.

    ``kind`` is "continuous" (drift + diffusion square root, discretized by
    STM integration and the trapezoidal noise rule) or "discrete" (exact
    closed-form flow with per-step noise square root, Qbar = G G^T).
    """

    name: str
    n_x: int
    n_u: int
    n_w: int
    kind: str
    schedule: StageSchedule
    observations: dict
    noise_sqrt: callable  # G_x(x, u) -> (n_x, n_w)
    drift: callable = None  # f(x, u, t), continuous models
    flow: callable = None  # (x, u, dt) -> (x1, A, B), discrete models
    scaling: Scaling = Scaling()
    x_bar0: np.ndarray = None
    P_tilde0: np.ndarray = None
    P_hat0: np.ndarray = None
    x_f: np.ndarray = None
    P_f: np.ndarray = None
    integrator: IntegratorOptions = IntegratorOptions()
    extras: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("continuous", "discrete"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.kind == "continuous" and self.drift is None:
            raise ConfigError("continuous models require a drift")
        if self.kind == "discrete" and self.flow is None:
            raise ConfigError("discrete models require a flow map")
        for name in ("P_tilde0", "P_hat0", "P_f"):
            P = getattr(self, name)
            if P is not None and np.min(np.linalg.eigvalsh(P)) < 0:
                raise ConfigError(f"{name} must be positive semidefinite")

    @property
    def n_stages(self):
        return self.schedule.n_stages

    @property
    def n_X(self):
        return self.n_x + 2 * self.n_x**2

    @property
    def n_U(self):
        return self.n_u + self.n_u * self.n_x

    def observation(self, obs_id):
        try:
            return self.observations[obs_id]
        except KeyError:
            raise ConfigError(f"unknown observation id {obs_id}") from None
