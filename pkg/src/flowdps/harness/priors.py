"""Built-in priors for the desk-scale experiments."""

from __future__ import annotations

import numpy as np

from ..gmm import GaussianMixture

__all__ = [
    "BUILTIN_PRIORS",
    "IMAGE_SHAPES",
    "builtin_prior",
    "smooth_image_16",
    "tri_gmm",
    "two_moons_gmm",
    "rings_gmm",
]


def smooth_image_16(length_scale: float = 2.0, side: int = 16) -> GaussianMixture:
    """Zero-mean Gaussian field with squared-exponential pixel covariance."""
    r = np.arange(side, dtype=float)
    py, px = np.meshgrid(r, r, indexing="ij")
    pts = np.stack([py.ravel(), px.ravel()], axis=1)
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    cov = np.exp(-d2 / (2.0 * length_scale**2))
    return GaussianMixture([1.0], np.zeros((1, side * side)), cov[None])


def tri_gmm(radius: float = 3.0, variance: float = 0.1) -> GaussianMixture:
    """Three equal isotropic components on a circle at 90, 210 and 330 degrees."""
    ang = np.deg2rad([90.0, 210.0, 330.0])
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return GaussianMixture.isotropic(np.full(3, 1 / 3), means, variance)


def two_moons_gmm(per_moon: int = 8, variance: float = 0.01) -> GaussianMixture:
    """Two interleaved half circles, each covered by ``per_moon`` components."""
    th = np.linspace(0.0, np.pi, per_moon)
    upper = np.stack([np.cos(th), np.sin(th)], axis=1)
    lower = np.stack([1.0 - np.cos(th), 0.5 - np.sin(th)], axis=1)
    means = np.concatenate([upper, lower]) - np.array([0.5, 0.25])
    k = len(means)
    return GaussianMixture.isotropic(np.full(k, 1.0 / k), means, variance)


def rings_gmm(radii=(1.0, 2.0), counts=(8, 16), variance: float = 0.01) -> GaussianMixture:
    """Concentric rings of equally weighted components."""
    means = []
    for r, c in zip(radii, counts):
        th = 2.0 * np.pi * np.arange(c) / c
        means.append(r * np.stack([np.cos(th), np.sin(th)], axis=1))
    means = np.concatenate(means)
    k = len(means)
    return GaussianMixture.isotropic(np.full(k, 1.0 / k), means, variance)


BUILTIN_PRIORS = {
    "smooth_image_16": smooth_image_16,
    "tri_gmm": tri_gmm,
    "two_moons_gmm": two_moons_gmm,
    "rings_gmm": rings_gmm,
}

# priors whose samples are images, and their (height, width)
IMAGE_SHAPES = {"smooth_image_16": (16, 16)}


def builtin_prior(name: str) -> GaussianMixture:
    try:
        return BUILTIN_PRIORS[name]()
    except KeyError:
        raise KeyError(f"unknown built-in prior {name!r}; choose from {sorted(BUILTIN_PRIORS)}") from None
