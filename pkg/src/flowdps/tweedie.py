"""Split a velocity into denoised and noise estimates and step with them."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .schedule import AffineSchedule, ScheduleError, eval_schedule, step_coefficients

__all__ = [
    "TweediePair",
    "tweedie_split",
    "euler_step",
    "decomposed_step",
    "mix_noise",
    "ddim_step",
]


@dataclass(frozen=True)
class TweediePair:
    x0_hat: np.ndarray
    x1_hat: np.ndarray
    t: float
    state: np.ndarray


def tweedie_split(sched: AffineSchedule, t: float, x, v) -> TweediePair:
    """Recover ``E[x0|x_t]`` and ``E[x1|x_t]`` from the marginal velocity ``v``.

    For the linear flow this is ``x0 = x - t v`` and ``x1 = x + (1 - t) v``.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if sched.is_linear:
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise ScheduleError(f"t={t} outside [0, 1]")
        return TweediePair(x - t * v, x + (1.0 - t) * v, t, x)
    a, b, a_dot, b_dot = eval_schedule(sched, t)
    if b_dot == 0.0 or a_dot == 0.0:
        name = "b_dot" if b_dot == 0.0 else "a_dot"
        raise ScheduleError(f"Tweedie split singular at t={t}: {name} = 0")
    d0 = a - a_dot * b / b_dot
    d1 = b - b_dot * a / a_dot
    if d0 == 0.0:
        raise ScheduleError(f"Tweedie split singular at t={t}: a - a_dot*b/b_dot = 0")
    if d1 == 0.0:
        raise ScheduleError(f"Tweedie split singular at t={t}: b - b_dot*a/a_dot = 0")
    x0 = (x - (b / b_dot) * v) / d0
    x1 = (x - (a / a_dot) * v) / d1
    return TweediePair(x0, x1, float(t), x)


def euler_step(sched: AffineSchedule, t: float, dt: float, x, v) -> np.ndarray:
    return np.asarray(x, dtype=float) + np.asarray(v, dtype=float) * dt


def decomposed_step(sched: AffineSchedule, t: float, dt: float, pair: TweediePair) -> np.ndarray:
    """``C1 * x0_hat + C2 * x1_hat``; identical to the Euler step."""
    c1, c2 = step_coefficients(sched, t, dt)
    return c1 * pair.x0_hat + c2 * pair.x1_hat


def mix_noise(x1_hat, eta: float, rng=None, epsilon=None) -> np.ndarray:
    """``sqrt(1 - eta) x1_hat + sqrt(eta) eps``, a variance-preserving blend."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta={eta} outside [0, 1]")
    x1_hat = np.asarray(x1_hat, dtype=float)
    if eta == 0.0:
        return x1_hat
    if epsilon is None:
        epsilon = np.random.default_rng(rng).standard_normal(x1_hat.shape)
    return math.sqrt(1.0 - eta) * x1_hat + math.sqrt(eta) * epsilon


def ddim_step(
    sched: AffineSchedule, t: float, dt: float, pair: TweediePair, eta: float, epsilon
) -> np.ndarray:
    """DDIM-form step ``C1 x0 + sqrt(C2^2 - k^2) x1 + k eps`` with ``k = C2 sqrt(eta)``."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta={eta} outside [0, 1]")
    c1, c2 = step_coefficients(sched, t, dt)
    k = c2 * math.sqrt(eta)
    rest = c2 * c2 - k * k
    assert rest >= -1e-15 * max(1.0, c2 * c2), "C2^2 - k^2 < 0"
    # sqrt(C2^2 - k^2) = |C2| sqrt(1 - eta); restore the sign of C2
    return c1 * pair.x0_hat + math.copysign(math.sqrt(max(rest, 0.0)), c2) * pair.x1_hat + k * np.asarray(epsilon)
