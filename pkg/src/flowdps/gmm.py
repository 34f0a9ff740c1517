"""Closed-form Gaussian-mixture priors along an affine probability path.

Everything here is exact: forward marginals, scores, conditional means
``E[x0 | x_t]``, marginal velocities and conjugate posteriors under a
linear-Gaussian measurement. The samplers use these both as the "model"
and as the ground truth they are checked against.

Batched inputs are accepted everywhere: ``x`` is ``(d,)`` or ``(n, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .schedule import AffineSchedule, ScheduleError, eval_schedule

__all__ = [
    "GaussianMixture",
    "SubspacePrior",
    "marginal_at",
    "log_density",
    "responsibilities",
    "denoiser_mean",
    "score",
    "marginal_velocity",
    "linear_gaussian_posterior",
    "sample",
    "denoiser_jacobian_fd",
]

_LOG_2PI = np.log(2.0 * np.pi)


class GaussianMixture:
    """Finite mixture of dense-covariance Gaussians.

    Parameters
    ----------
    weights : array_like, shape (K,)
        Positive mixing weights summing to one.
    means : array_like, shape (K, d)
    covs : array_like, shape (K, d, d)
        Symmetric positive semidefinite covariances.
    """

    def __init__(self, weights, means, covs):
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        mu = np.atleast_2d(np.asarray(means, dtype=float))
        cov = np.asarray(covs, dtype=float)
        if cov.ndim == 2:
            cov = cov[None]
        k, d = mu.shape
        if w.shape != (k,) or cov.shape != (k, d, d):
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, covs {cov.shape}"
            )
        if np.any(w <= 0):
            raise ValueError("mixture weights must be positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, not 1")
        if np.max(np.abs(cov - np.swapaxes(cov, 1, 2))) > 1e-12:
            raise ValueError("covariances must be symmetric")
        self.weights = w
        self.means = mu
        self.covs = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        lam = np.linalg.eigvalsh(self.covs)
        if lam.min() < -1e-10:
            raise ValueError(f"covariance not PSD (min eigenvalue {lam.min():.3e})")
        for arr in (self.weights, self.means, self.covs):
            arr.setflags(write=False)

    @classmethod
    def diagonal(cls, weights, means, variances) -> "GaussianMixture":
        var = np.atleast_2d(np.asarray(variances, dtype=float))
        covs = np.stack([np.diag(v) for v in var])
        return cls(weights, means, covs)

    @classmethod
    def isotropic(cls, weights, means, variance) -> "GaussianMixture":
        mu = np.atleast_2d(np.asarray(means, dtype=float))
        var = np.broadcast_to(np.asarray(variance, dtype=float), (mu.shape[0],))
        return cls(weights, mu, np.stack([v * np.eye(mu.shape[1]) for v in var]))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @cached_property
    def _eig(self):
        lam, vec = np.linalg.eigh(self.covs)
        # roundoff below zero is not a real direction of negative variance
        return np.clip(lam, 0.0, None), vec

    def component(self, k: int) -> "GaussianMixture":
        return GaussianMixture([1.0], self.means[k : k + 1], self.covs[k : k + 1])

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        dev = self.means - m
        within = np.einsum("k,kij->ij", self.weights, self.covs)
        return within + np.einsum("k,ki,kj->ij", self.weights, dev, dev)

    def __repr__(self):
        return f"GaussianMixture(K={self.n_components}, d={self.dim})"


@dataclass(frozen=True)
class SubspacePrior:
    """Wide Gaussian spread over an affine subspace ``offset + span(basis)``."""

    basis: np.ndarray
    offset: np.ndarray
    spread: float

    def __post_init__(self):
        basis = np.atleast_2d(np.asarray(self.basis, dtype=float))
        gram = basis.T @ basis
        if np.max(np.abs(gram - np.eye(basis.shape[1]))) > 1e-10:
            raise ValueError("subspace basis columns must be orthonormal")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))

    @property
    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T

    def to_mixture(self, eps: float = 1e-8) -> GaussianMixture:
        if not 0 <= eps <= 1e-8:
            raise ValueError("regulariser eps must lie in [0, 1e-8]")
        d = self.basis.shape[0]
        cov = self.spread * self.projector + eps * np.eye(d)
        return GaussianMixture([1.0], self.offset[None], cov[None])


def _as_batch(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if xb.shape[-1] != d:
        raise ValueError(f"expected dimension {d}, got {xb.shape[-1]}")
    return xb, single


def marginal_at(prior: GaussianMixture, sched: AffineSchedule, t: float) -> GaussianMixture:
    """Mixture of ``N(a mu_k, a^2 Sigma_k + b^2 I)``."""
    a, b, _, _ = eval_schedule(sched, t)
    covs = a * a * prior.covs + b * b * np.eye(prior.dim)
    return GaussianMixture(prior.weights, a * prior.means, covs)


def _component_terms(prior, a, b, xb):
    """Per-component log-density, posterior mean of x0 and score at ``xb``.

    Returns arrays of shape (K, n), (K, n, d), (K, n, d).
    """
    lam, vec = prior._eig
    s = a * a * lam + b * b  # (K, d) marginal variances in the eigenbasis
    if np.any(s <= 0):
        raise ScheduleError("degenerate marginal covariance (b_t = 0 with singular prior)")
    r = xb[None, :, :] - a * prior.means[:, None, :]
    z = np.einsum("knd,kde->kne", r, vec)
    logn = -0.5 * np.sum(z * z / s[:, None, :], axis=-1)
    logn -= 0.5 * (np.sum(np.log(s), axis=-1)[:, None] + prior.dim * _LOG_2PI)
    gain = a * lam / s
    x0 = prior.means[:, None, :] + np.einsum("kne,kde->knd", gain[:, None, :] * z, vec)
    sc = -np.einsum("kne,kde->knd", z / s[:, None, :], vec)
    return logn, x0, sc


def _log_resp(prior, logn):
    logw = np.log(prior.weights)[:, None] + logn
    return logw - logsumexp(logw, axis=0, keepdims=True)


def log_density(prior: GaussianMixture, sched: AffineSchedule, t: float, x) -> np.ndarray:
    """Log-density of the time-``t`` marginal."""
    a, b, _, _ = eval_schedule(sched, t)
    xb, single = _as_batch(x, prior.dim)
    logn, _, _ = _component_terms(prior, a, b, xb)
    out = logsumexp(np.log(prior.weights)[:, None] + logn, axis=0)
    return out[0] if single else out


def responsibilities(prior: GaussianMixture, sched: AffineSchedule, t: float, x) -> np.ndarray:
    """Posterior component probabilities given ``x_t = x``, shape (n, K)."""
    a, b, _, _ = eval_schedule(sched, t)
    xb, single = _as_batch(x, prior.dim)
    logn, _, _ = _component_terms(prior, a, b, xb)
    resp = np.exp(_log_resp(prior, logn)).T
    return resp[0] if single else resp


def denoiser_mean(prior: GaussianMixture, sched: AffineSchedule, t: float, x) -> np.ndarray:
    """Exact conditional mean ``E[x0 | x_t = x]``.

    At ``t = 0`` this is ``x``; at ``t = 1`` it is the prior mean (the
    responsibilities under ``N(0, I)`` reduce to the mixture weights).
    """
    a, b, _, _ = eval_schedule(sched, t)
    xb, single = _as_batch(x, prior.dim)
    if b == 0.0:
        out = xb.copy()
    else:
        logn, x0, _ = _component_terms(prior, a, b, xb)
        resp = np.exp(_log_resp(prior, logn))
        out = np.einsum("kn,knd->nd", resp, x0)
    return out[0] if single else out


def score(prior: GaussianMixture, sched: AffineSchedule, t: float, x) -> np.ndarray:
    """Gradient of the time-``t`` marginal log-density."""
    a, b, _, _ = eval_schedule(sched, t)
    if b == 0.0:
        raise ScheduleError("score is singular at t=0 (b_t = 0)")
    xb, single = _as_batch(x, prior.dim)
    logn, _, sc = _component_terms(prior, a, b, xb)
    resp = np.exp(_log_resp(prior, logn))
    out = np.einsum("kn,knd->nd", resp, sc)
    return out[0] if single else out


def marginal_velocity(prior: GaussianMixture, sched: AffineSchedule, t: float, x) -> np.ndarray:
    """``a_dot E[x0|x] + b_dot E[x1|x]`` with ``E[x1|x] = (x - a E[x0|x]) / b``."""
    t = float(t)
    if not 0.0 < t < 1.0:
        raise ScheduleError(f"marginal velocity evaluated at endpoint t={t}")
    a, b, a_dot, b_dot = eval_schedule(sched, t)
    x = np.asarray(x, dtype=float)
    x0 = denoiser_mean(prior, sched, t, x)
    x1 = (x - a * x0) / b
    return a_dot * x0 + b_dot * x1


def _dense(op) -> np.ndarray:
    if isinstance(op, np.ndarray):
        return np.atleast_2d(op.astype(float))
    return op.to_dense()


def linear_gaussian_posterior(
    prior: GaussianMixture, A, y, sigma_n: float
) -> GaussianMixture:
    """Exact posterior of ``x0`` given ``y = A x0 + sigma_n * noise``.

    Each component is conditioned in gain form,
    ``Sigma - Sigma A^T S^{-1} A Sigma`` with ``S = A Sigma A^T + sigma_n^2 I``,
    which equals ``(Sigma^{-1} + A^T A / sigma_n^2)^{-1}`` without
    inverting ``Sigma`` (smooth image priors are numerically rank deficient).
    Component weights are reweighted by the evidence ``N(y; A mu, S)``.
    """
    if not sigma_n > 0:
        raise ValueError("sigma_n must be positive")
    mat = _dense(A)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if mat.shape != (y.shape[0], prior.dim):
        raise ValueError(f"operator shape {mat.shape} incompatible with y {y.shape} / d={prior.dim}")
    m = mat.shape[0]
    means, covs, logev = [], [], []
    for mu, cov in zip(prior.means, prior.covs):
        s = mat @ cov @ mat.T + sigma_n**2 * np.eye(m)
        cho = linalg.cho_factor(s, lower=True)
        resid = y - mat @ mu
        cross = cov @ mat.T
        means.append(mu + cross @ linalg.cho_solve(cho, resid))
        post = cov - cross @ linalg.cho_solve(cho, cross.T)
        covs.append(0.5 * (post + post.T))
        logdet = 2.0 * np.sum(np.log(np.diag(cho[0])))
        logev.append(-0.5 * (resid @ linalg.cho_solve(cho, resid) + logdet + m * _LOG_2PI))
    logw = np.log(prior.weights) + np.asarray(logev)
    w = np.exp(logw - logsumexp(logw))
    keep = w > 0
    w = w[keep] / w[keep].sum()
    return GaussianMixture(w, np.asarray(means)[keep], np.asarray(covs)[keep])


def sample(prior: GaussianMixture, rng, n: int, return_labels: bool = False):
    """Draw ``n`` iid samples, optionally with their component labels."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(rng)
    labels = rng.choice(prior.n_components, size=n, p=prior.weights)
    z = rng.standard_normal((n, prior.dim))
    lam, vec = prior._eig
    x = np.empty((n, prior.dim))
    for k in np.unique(labels):
        sel = labels == k
        x[sel] = prior.means[k] + (z[sel] * np.sqrt(lam[k])) @ vec[k].T
    return (x, labels) if return_labels else x


def denoiser_jacobian_fd(
    prior: GaussianMixture, sched: AffineSchedule, t: float, x, h: float = 1e-4
) -> np.ndarray:
    """Centred finite-difference Jacobian of :func:`denoiser_mean` at ``x``."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    probes = np.concatenate([x + h * np.eye(d), x - h * np.eye(d)])
    out = denoiser_mean(prior, sched, t, probes)
    return (out[:d] - out[d:]).T / (2.0 * h)
