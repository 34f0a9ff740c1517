"""Affine conditional flow schedules, time grids and per-step coefficients.

A schedule gives the coefficients of ``x_t = a(t) x0 + b(t) x1`` together
with their time derivatives. Sampling runs from ``t = 1`` (noise) down to
``t = 0`` (data) with negative step ``dt``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "AffineSchedule",
    "TimeGrid",
    "ScheduleError",
    "eval_schedule",
    "step_coefficients",
    "zeta",
    "beta_from_zeta",
    "beta_t",
    "beta_closed_form",
    "make_time_grid",
    "get_schedule",
    "SCHEDULES",
]


class ScheduleError(ValueError):
    """Raised for out-of-domain times and coefficient singularities."""


ScalarFn = Callable[[float], float]


@dataclass(frozen=True)
class AffineSchedule:
    """Coefficient functions of an affine conditional flow.

    ``kind`` is ``"linear"`` for the rectified-flow path ``a = 1 - t``,
    ``b = t``; anything else is evaluated through the four callables.
    """

    kind: str = "linear"
    a: ScalarFn | None = field(default=None, compare=False)
    b: ScalarFn | None = field(default=None, compare=False)
    a_dot: ScalarFn | None = field(default=None, compare=False)
    b_dot: ScalarFn | None = field(default=None, compare=False)
    name: str = "linear"

    def __post_init__(self):
        if self.kind not in ("linear", "generic"):
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "generic" and None in (self.a, self.b, self.a_dot, self.b_dot):
            raise ScheduleError("generic schedule needs a, b, a_dot and b_dot")

    @classmethod
    def linear(cls) -> "AffineSchedule":
        return cls("linear", name="linear")

    @classmethod
    def generic(cls, a, b, a_dot, b_dot, name="generic") -> "AffineSchedule":
        return cls("generic", a, b, a_dot, b_dot, name=name)

    @property
    def is_linear(self) -> bool:
        return self.kind == "linear"


def _cos_a(t):
    if t == 1.0:
        return 0.0
    return math.cos(0.5 * math.pi * t)


def _cos_b(t):
    if t == 0.0:
        return 0.0
    return math.sin(0.5 * math.pi * t)


def _cosine() -> AffineSchedule:
    # endpoint values are pinned so the boundary conditions hold exactly
    return AffineSchedule.generic(
        _cos_a,
        _cos_b,
        lambda t: -0.5 * math.pi * math.sin(0.5 * math.pi * t),
        lambda t: 0.5 * math.pi * math.cos(0.5 * math.pi * t),
        name="cosine",
    )


def _quadratic() -> AffineSchedule:
    # a = (1-t)^2, b = t(2-t); both Tweedie denominators equal 1
    return AffineSchedule.generic(
        lambda t: (1.0 - t) ** 2,
        lambda t: t * (2.0 - t),
        lambda t: -2.0 * (1.0 - t),
        lambda t: 2.0 * (1.0 - t),
        name="quadratic",
    )


SCHEDULES: dict[str, Callable[[], AffineSchedule]] = {
    "linear": AffineSchedule.linear,
    "cosine": _cosine,
    "quadratic": _quadratic,
}


def get_schedule(name: str) -> AffineSchedule:
    try:
        return SCHEDULES[name]()
    except KeyError:
        raise ScheduleError(
            f"unknown schedule {name!r}; choose from {sorted(SCHEDULES)}"
        ) from None


def _check_t(t: float) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ScheduleError(f"t={t} outside [0, 1]")
    return t


def eval_schedule(sched: AffineSchedule, t: float) -> tuple[float, float, float, float]:
    """Return ``(a, b, a_dot, b_dot)`` at time ``t``."""
    t = _check_t(t)
    if sched.is_linear:
        return 1.0 - t, t, -1.0, 1.0
    return (
        float(sched.a(t)),
        float(sched.b(t)),
        float(sched.a_dot(t)),
        float(sched.b_dot(t)),
    )


def step_coefficients(sched: AffineSchedule, t: float, dt: float) -> tuple[float, float]:
    """Euler-step weights ``C1 = a + a_dot*dt`` and ``C2 = b + b_dot*dt``.

    For the linear schedule these are exactly ``(a(t+dt), b(t+dt))``.
    """
    t = _check_t(t)
    if dt > 0:
        raise ScheduleError(f"dt={dt} must be <= 0 (sampling runs 1 -> 0)")
    if t + dt < 0.0 and not math.isclose(t + dt, 0.0, abs_tol=1e-15):
        raise ScheduleError(f"t+dt={t + dt} < 0")
    if sched.is_linear:
        t_next = max(t + dt, 0.0)
        return 1.0 - t_next, t_next
    a, b, a_dot, b_dot = eval_schedule(sched, t)
    return a + a_dot * dt, b + b_dot * dt


def zeta(sched: AffineSchedule, t: float, convention: str = "a_dot") -> float:
    """Coefficient converting a likelihood score into a velocity correction.

    ``convention="a_dot"`` uses ``a_dot*b - b^2*a_dot/a``; ``"b_dot"``
    uses ``b_dot*b - b^2*a_dot/a``, the form obtained from the score
    identity of the marginal velocity.
    """
    a, b, a_dot, b_dot = eval_schedule(sched, t)
    if a == 0.0:
        raise ScheduleError(f"zeta is singular at t={t} (a_t = 0)")
    if convention == "a_dot":
        return a_dot * b - b * b * a_dot / a
    if convention == "b_dot":
        return b_dot * b - b * b * a_dot / a
    raise ScheduleError(f"unknown zeta convention {convention!r}")


def beta_from_zeta(
    sched: AffineSchedule,
    t: float,
    dt: float,
    convention: str = "a_dot",
    zeta_fn: Callable[..., float] | None = None,
) -> float:
    """Likelihood step size ``(zeta/a) * dt / C1`` for any schedule."""
    zeta_fn = zeta if zeta_fn is None else zeta_fn
    a = eval_schedule(sched, t)[0]
    c1, _ = step_coefficients(sched, t, dt)
    if c1 == 0.0:
        raise ScheduleError(f"C1 vanishes at t={t}, dt={dt}")
    return zeta_fn(sched, t, convention) / a * dt / c1


def beta_closed_form(sigma_t: float, sigma_next: float) -> float:
    """Linear-flow step size ``dt s(2s-1) / ((1-s)^2 (1-s'))``."""
    if sigma_t >= 1.0 or sigma_next >= 1.0:
        raise ScheduleError(
            f"beta_t singular at sigma_t={sigma_t}, sigma_next={sigma_next}"
        )
    dt = sigma_next - sigma_t
    return dt * sigma_t * (2.0 * sigma_t - 1.0) / ((1.0 - sigma_t) ** 2 * (1.0 - sigma_next))


@dataclass(frozen=True)
class TimeGrid:
    """Strictly decreasing times from exactly 1 to exactly 0."""

    times: tuple[float, ...]
    shift: float = 1.0

    def __post_init__(self):
        ts = self.times
        if len(ts) < 2:
            raise ScheduleError("a time grid needs at least two entries")
        if ts[0] != 1.0 or ts[-1] != 0.0:
            raise ScheduleError("time grid must start at 1 and end at 0")
        if any(t1 <= t2 for t1, t2 in zip(ts, ts[1:])):
            raise ScheduleError("time grid must be strictly decreasing")

    @property
    def nfe(self) -> int:
        return len(self.times) - 1

    def steps(self):
        """Iterate ``(index, t, t_next)`` over the grid."""
        for k in range(self.nfe):
            yield k, self.times[k], self.times[k + 1]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.times)


def make_time_grid(nfe: int, shift: float = 1.0) -> TimeGrid:
    """Uniform grid in ``u`` pushed through ``s*u / (1 + (s-1)*u)``."""
    if int(nfe) != nfe or nfe < 1:
        raise ScheduleError(f"nfe must be a positive integer, got {nfe}")
    if not shift > 0:
        raise ScheduleError(f"shift must be positive, got {shift}")
    nfe = int(nfe)
    u = np.linspace(1.0, 0.0, nfe + 1)
    ts = shift * u / (1.0 + (shift - 1.0) * u)
    ts[0], ts[-1] = 1.0, 0.0
    return TimeGrid(tuple(float(t) for t in ts), float(shift))


def beta_t(grid: TimeGrid, step_index: int) -> float:
    """Closed-form linear-flow ``beta_t`` at step ``step_index`` of ``grid``."""
    if not 0 <= step_index < grid.nfe:
        raise ScheduleError(f"step index {step_index} outside grid of {grid.nfe} steps")
    return beta_closed_form(grid.times[step_index], grid.times[step_index + 1])
