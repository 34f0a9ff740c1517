"""Flow samplers: unconditional, FlowDPS, beta-step posterior velocity,
FlowChef, and exact posterior sampling for Gaussian-mixture priors.

All solvers start from ``x ~ N(0, I)`` at ``t = 1``, walk the configured
time grid down to ``t = 0`` and return a :class:`Trajectory`. A single
``numpy.random.Generator`` drives a solve: the initial state is drawn
first, then one standard-normal block per step whether or not the step
uses it, so solvers that differ only in how they use noise stay coupled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import gmm
from .operators import (
    ConjugateGradient,
    GradientDescent,
    Measurement,
    data_consistency_solve,
    likelihood_grad,
)
from .schedule import AffineSchedule, TimeGrid, beta_from_zeta, make_time_grid, step_coefficients
from .tweedie import TweediePair, decomposed_step, tweedie_split
from .velocity import T_MIN, AnalyticVelocity, VelocityField, guided_velocity

__all__ = [
    "SolverConfig",
    "Trajectory",
    "SolverError",
    "sample_flow",
    "flowdps_step",
    "flowdps_solve",
    "dps_velocity_solve",
    "flowchef_solve",
    "posterior_oracle_solve",
    "SOLVERS",
]


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Sampler settings.

    ``gamma`` is ``"sigma_t"``, ``"one_minus_sigma_t"``, ``"one"`` or a float
    constant; ``eta`` is ``"flowdps"`` (``1 - sigma_next``), ``"zero"`` or a
    float constant. ``dc=None`` disables data consistency.
    """

    grid: TimeGrid = field(default_factory=lambda: make_time_grid(28, 4.0))
    schedule: AffineSchedule = field(default_factory=AffineSchedule.linear)
    gamma: str | float = "sigma_t"
    eta: str | float = "flowdps"
    dc: GradientDescent | ConjugateGradient | None = field(default_factory=GradientDescent)
    guidance_lambda: float = 1.0
    condition: int | None = None
    zeta_convention: str = "a_dot"
    flowchef_step: float = 2.0
    n_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.gamma, str) and self.gamma not in ("sigma_t", "one_minus_sigma_t", "one"):
            raise ValueError(f"unknown gamma schedule {self.gamma!r}")
        if isinstance(self.eta, str) and self.eta not in ("flowdps", "zero"):
            raise ValueError(f"unknown eta schedule {self.eta!r}")
        if not isinstance(self.gamma, str) and not 0.0 <= self.gamma <= 1.0:
            raise ValueError("constant gamma must lie in [0, 1]")
        if not isinstance(self.eta, str) and not 0.0 <= self.eta <= 1.0:
            raise ValueError("constant eta must lie in [0, 1]")

    @property
    def nfe(self) -> int:
        return self.grid.nfe

    def gamma_at(self, sigma_t: float) -> float:
        if self.gamma == "sigma_t":
            return sigma_t
        if self.gamma == "one_minus_sigma_t":
            return 1.0 - sigma_t
        if self.gamma == "one":
            return 1.0
        return float(self.gamma)

    def eta_at(self, sigma_next: float) -> float:
        if self.eta == "flowdps":
            return 1.0 - sigma_next
        if self.eta == "zero":
            return 0.0
        return float(self.eta)

    def with_(self, **kw) -> "SolverConfig":
        return replace(self, **kw)


@dataclass
class Trajectory:
    """Times, per-time states and per-step estimates of one (batched) solve.

    ``states`` and the per-step lists are empty when the solve ran with
    ``record=False``; ``final`` is always set.
    """

    times: np.ndarray
    states: list = field(default_factory=list)
    x0_hat: list = field(default_factory=list)
    x0_y: list = field(default_factory=list)
    final: np.ndarray | None = None


def _velocity(field_: VelocityField, t, x, cfg: SolverConfig):
    # endpoint times are nudged inside the open interval the fields accept
    te = min(max(t, T_MIN), 1.0 - T_MIN)
    if cfg.condition is None or not field_.supports_condition:
        return field_(te, x)
    v_cond = field_(te, x, cfg.condition)
    if cfg.guidance_lambda == 1.0:
        return v_cond
    return guided_velocity(field_(te, x), v_cond, cfg.guidance_lambda)


def _mix(x1_hat, eta, sigma_next, eps, literal):
    if eta == 0.0:
        return x1_hat
    if literal:
        return math.sqrt(sigma_next) * x1_hat + math.sqrt(1.0 - sigma_next) * eps
    return math.sqrt(1.0 - eta) * x1_hat + math.sqrt(eta) * eps


def _start(dim, cfg, rng):
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    return rng, rng.standard_normal((cfg.n_samples, dim))


def _check(x, k):
    if not np.all(np.isfinite(x)):
        raise SolverError(f"non-finite state after step {k}")


def _finish(traj, x, record):
    if record:
        traj.states.append(x.copy())
    traj.final = x
    return traj


def sample_flow(field_: VelocityField, cfg: SolverConfig, rng=None, record=True) -> Trajectory:
    """Euler sampling through the Tweedie decomposition with optional noise mixing."""
    rng, x = _start(field_.dim, cfg, rng)
    traj = Trajectory(cfg.grid.as_array())
    sched = cfg.schedule
    for k, t, t_next in cfg.grid.steps():
        eps = rng.standard_normal(x.shape)
        if record:
            traj.states.append(x.copy())
        v = _velocity(field_, t, x, cfg)
        pair = tweedie_split(sched, t, x, v)
        x1 = _mix(pair.x1_hat, cfg.eta_at(t_next), t_next, eps, cfg.eta == "flowdps")
        x = decomposed_step(sched, t, t_next - t, TweediePair(pair.x0_hat, x1, t, x))
        if record:
            traj.x0_hat.append(pair.x0_hat)
        _check(x, k)
    return _finish(traj, x, record)


def flowdps_step(field_, sched, t, t_next, x, meas: Measurement, cfg: SolverConfig, rng):
    """One FlowDPS update; returns ``(x_next, (x0_hat, x0_hat_y))``.

    ``rng`` may be a Generator or a pre-drawn standard-normal array.
    """
    eps = rng if isinstance(rng, np.ndarray) else np.random.default_rng(rng).standard_normal(np.shape(x))
    v = _velocity(field_, t, x, cfg)
    pair = tweedie_split(sched, t, x, v)
    if cfg.dc is None or cfg.dc.steps == 0:
        # no data consistency: skip the blend so the step reduces exactly
        x0_y = x0_tilde = pair.x0_hat
    else:
        x0_y = data_consistency_solve(meas.operator, meas.y, pair.x0_hat, cfg.dc)
        gamma = cfg.gamma_at(t)
        x0_tilde = gamma * x0_y + (1.0 - gamma) * pair.x0_hat
    x1_tilde = _mix(pair.x1_hat, cfg.eta_at(t_next), t_next, eps, cfg.eta == "flowdps")
    c1, c2 = step_coefficients(sched, t, t_next - t)
    return c1 * x0_tilde + c2 * x1_tilde, (pair.x0_hat, x0_y)


def flowdps_solve(field_, meas: Measurement, cfg: SolverConfig, rng=None, record=True) -> Trajectory:
    """Flow-driven posterior sampling: data-consistent denoised estimate
    blended by ``gamma``, stochastic renoising by ``eta``."""
    rng, x = _start(field_.dim, cfg, rng)
    traj = Trajectory(cfg.grid.as_array())
    for k, t, t_next in cfg.grid.steps():
        eps = rng.standard_normal(x.shape)
        if record:
            traj.states.append(x.copy())
        x, (x0_hat, x0_y) = flowdps_step(field_, cfg.schedule, t, t_next, x, meas, cfg, eps)
        if record:
            traj.x0_hat.append(x0_hat)
            traj.x0_y.append(x0_y)
        _check(x, k)
    return _finish(traj, x, record)


def dps_velocity_solve(field_, meas: Measurement, cfg: SolverConfig, rng=None, record=True) -> Trajectory:
    """Single likelihood-gradient step on the denoised estimate,
    ``x0 <- x0 - beta_t * grad log p(y | x0)``, then the decomposed step.

    The first step (``a_t = 0``) carries no likelihood term.
    """
    rng, x = _start(field_.dim, cfg, rng)
    traj = Trajectory(cfg.grid.as_array())
    sched = cfg.schedule
    op, y = meas.operator, meas.y
    for k, t, t_next in cfg.grid.steps():
        eps = rng.standard_normal(x.shape)
        if record:
            traj.states.append(x.copy())
        v = _velocity(field_, t, x, cfg)
        pair = tweedie_split(sched, t, x, v)
        x0 = pair.x0_hat
        if t < 1.0:
            beta = beta_from_zeta(sched, t, t_next - t, cfg.zeta_convention)
            x0 = x0 - beta * likelihood_grad(op, y, x0, meas.sigma_n)
        x1 = _mix(pair.x1_hat, cfg.eta_at(t_next), t_next, eps, cfg.eta == "flowdps")
        x = decomposed_step(sched, t, t_next - t, TweediePair(x0, x1, t, x))
        if record:
            traj.x0_hat.append(pair.x0_hat)
            traj.x0_y.append(x0)
        _check(x, k)
    return _finish(traj, x, record)


def flowchef_solve(field_, meas: Measurement, cfg: SolverConfig, rng=None, record=True) -> Trajectory:
    """Baseline: ``x_t <- x_t - s grad_{x0} ||A x0 - y||^2`` then an Euler step.

    The velocity evaluated before the correction is reused for the step
    (one evaluation per step; the gradient is not propagated through the
    field).
    """
    if cfg.flowchef_step < 0:
        raise ValueError("FlowChef step size must be non-negative")
    rng, x = _start(field_.dim, cfg, rng)
    traj = Trajectory(cfg.grid.as_array())
    sched = cfg.schedule
    op, y, s = meas.operator, meas.y, cfg.flowchef_step
    for k, t, t_next in cfg.grid.steps():
        rng.standard_normal(x.shape)
        if record:
            traj.states.append(x.copy())
        v = _velocity(field_, t, x, cfg)
        x0 = tweedie_split(sched, t, x, v).x0_hat
        if s:
            x = x - s * 2.0 * op.adjoint(op(x0) - y)
        x = decomposed_step(sched, t, t_next - t, tweedie_split(sched, t, x, v))
        if record:
            traj.x0_hat.append(x0)
        _check(x, k)
    return _finish(traj, x, record)


def posterior_oracle_solve(prior: gmm.GaussianMixture, meas: Measurement, cfg: SolverConfig,
                           rng=None, record=True) -> Trajectory:
    """Sample the exact posterior flow using the analytic posterior mixture."""
    post = gmm.linear_gaussian_posterior(prior, meas.operator.to_dense(), meas.y, meas.sigma_n)
    return sample_flow(AnalyticVelocity(post, cfg.schedule), cfg, rng, record)


SOLVERS = ("flowdps", "dps_velocity", "flowchef", "oracle", "unconditional")
