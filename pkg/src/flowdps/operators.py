"""Linear forward models ``y = A x + n`` and data-consistency solvers.

Images are flattened row-major, so an ``H x W`` image is a vector of
length ``H*W``. Every operator accepts a single vector or an ``(n, d)``
batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _core

__all__ = [
    "LinearOperator",
    "DenseOperator",
    "AvgPoolOperator",
    "BlurOperator",
    "MaskOperator",
    "IdentityOperator",
    "Measurement",
    "OptimizationError",
    "GradientDescent",
    "ConjugateGradient",
    "apply",
    "apply_adjoint",
    "gaussian_blur_kernel",
    "make_measurement",
    "likelihood_grad",
    "log_likelihood",
    "data_consistency_solve",
]


class OptimizationError(RuntimeError):
    """A data-consistency iterate became non-finite."""


class LinearOperator:
    """Base class; subclasses implement ``_forward`` and ``_adjoint`` on batches."""

    input_dim: int
    output_dim: int

    def _forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _run(self, fn, v, dim, what):
        v = np.asarray(v, dtype=float)
        if v.shape[-1] != dim:
            raise ValueError(f"{what} expects dimension {dim}, got {v.shape[-1]}")
        out = fn(np.atleast_2d(v))
        return out[0] if v.ndim == 1 else out

    def __call__(self, x):
        return self._run(self._forward, x, self.input_dim, type(self).__name__)

    def adjoint(self, y):
        return self._run(self._adjoint, y, self.output_dim, f"{type(self).__name__}.adjoint")

    def to_dense(self) -> np.ndarray:
        """Materialise the ``(m, d)`` matrix of the realised action."""
        return self._forward(np.eye(self.input_dim)).T.copy()

    @property
    def shape(self):
        return self.output_dim, self.input_dim


class DenseOperator(LinearOperator):
    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        self.output_dim, self.input_dim = self.matrix.shape

    def _forward(self, x):
        return x @ self.matrix.T

    def _adjoint(self, y):
        return y @ self.matrix

    def to_dense(self):
        return self.matrix.copy()


class IdentityOperator(DenseOperator):
    def __init__(self, dim: int):
        super().__init__(np.eye(dim))


class AvgPoolOperator(LinearOperator):
    """Block-mean downsampling by ``factor`` (super-resolution forward model)."""

    def __init__(self, height: int, width: int, factor: int):
        if factor < 1 or height % factor or width % factor:
            raise ValueError(f"factor {factor} must divide both {height} and {width}")
        self.height, self.width, self.factor = height, width, factor
        self.input_dim = height * width
        self.output_dim = (height // factor) * (width // factor)
        self.out_shape = (height // factor, width // factor)

    def _forward(self, x):
        img = np.ascontiguousarray(x.reshape(-1, self.height, self.width))
        return _core.avgpool2d(img, self.factor).reshape(len(x), -1)

    def _adjoint(self, y):
        img = np.ascontiguousarray(y.reshape(-1, *self.out_shape))
        return _core.avgpool2d_adjoint(img, self.factor).reshape(len(y), -1)


class BlurOperator(LinearOperator):
    """Zero-padded 'same' convolution with a normalised kernel."""

    def __init__(self, height: int, width: int, kernel):
        kernel = np.atleast_2d(np.asarray(kernel, dtype=float))
        if kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
            raise ValueError("blur kernel sides must be odd")
        if abs(kernel.sum() - 1.0) > 1e-10:
            raise ValueError(f"blur kernel sums to {kernel.sum()!r}, not 1")
        self.height, self.width = height, width
        self.kernel = np.ascontiguousarray(kernel)
        self._flipped = np.ascontiguousarray(kernel[::-1, ::-1])
        self.input_dim = self.output_dim = height * width
        self.out_shape = (height, width)

    def _forward(self, x):
        img = np.ascontiguousarray(x.reshape(-1, self.height, self.width))
        return _core.correlate2d(img, self._flipped).reshape(len(x), -1)

    def _adjoint(self, y):
        img = np.ascontiguousarray(y.reshape(-1, self.height, self.width))
        return _core.correlate2d(img, self.kernel).reshape(len(y), -1)


class MaskOperator(LinearOperator):
    """Keep the entries at ``indices`` (inpainting forward model)."""

    def __init__(self, dim: int, indices):
        idx = np.asarray(indices, dtype=int).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= dim):
            raise ValueError("mask indices out of range")
        if np.unique(idx).size != idx.size:
            raise ValueError("mask indices must be unique")
        self.indices = idx
        self.input_dim, self.output_dim = dim, idx.size

    def _forward(self, x):
        return x[:, self.indices]

    def _adjoint(self, y):
        out = np.zeros((len(y), self.input_dim))
        out[:, self.indices] = y
        return out


def apply(op: LinearOperator, x) -> np.ndarray:
    return op(x)


def apply_adjoint(op: LinearOperator, y) -> np.ndarray:
    return op.adjoint(y)


def gaussian_blur_kernel(size: int, std: float) -> np.ndarray:
    """Separable Gaussian taps on a ``size x size`` grid, normalised to sum 1."""
    if int(size) != size or size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")
    if not std > 0:
        raise ValueError("kernel std must be positive")
    r = np.arange(size) - size // 2
    g = np.exp(-(r**2) / (2.0 * std**2))
    k = np.outer(g, g)
    return k / k.sum()


@dataclass(frozen=True)
class Measurement:
    y: np.ndarray
    operator: LinearOperator
    sigma_n: float

    def __post_init__(self):
        if np.shape(self.y)[-1] != self.operator.output_dim:
            raise ValueError("measurement dimension does not match operator output")
        if self.sigma_n < 0:
            raise ValueError("sigma_n must be non-negative")


def make_measurement(op: LinearOperator, x0, sigma_n: float, rng) -> Measurement:
    rng = np.random.default_rng(rng)
    clean = op(x0)
    noise = rng.standard_normal(np.shape(clean))
    return Measurement(clean + sigma_n * noise, op, float(sigma_n))


def log_likelihood(op: LinearOperator, y, x, sigma_n: float):
    r = np.asarray(y) - op(x)
    return -0.5 * np.sum(r * r, axis=-1) / sigma_n**2


def likelihood_grad(op: LinearOperator, y, x, sigma_n: float) -> np.ndarray:
    """``grad_x log N(y; A x, sigma_n^2 I) = -A^T (A x - y) / sigma_n^2``."""
    if not sigma_n > 0:
        raise ValueError("likelihood gradient is singular for sigma_n = 0")
    return -op.adjoint(op(x) - y) / sigma_n**2


@dataclass(frozen=True)
class GradientDescent:
    """Fixed-step descent on the measurement misfit.

    ``reduction="mean"`` minimises ``||y - A x||^2 / m`` (mean over the m
    measurement entries); ``reduction="sum"`` minimises ``0.5 ||y - A x||^2``.
    Large steps are not clipped, so the iteration can be non-monotone.
    """

    steps: int = 3
    step_size: float = 15.0
    reduction: str = "mean"

    def __post_init__(self):
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


@dataclass(frozen=True)
class ConjugateGradient:
    """Conjugate gradient on the normal equations (CGLS)."""

    steps: int = 3
    tol: float = 1e-10


def _descent(op, y, x, method):
    scale = method.step_size * (2.0 / op.output_dim if method.reduction == "mean" else 1.0)
    for it in range(method.steps):
        x = x - scale * op.adjoint(op(x) - y)
        if not np.all(np.isfinite(x)):
            raise OptimizationError(f"gradient descent diverged at iteration {it}")
    return x


def _cgls(op, y, x, method):
    # rows of the batch are independent least-squares problems
    r = y - op(x)
    s = op.adjoint(r)
    p = s.copy()
    gamma = np.sum(s * s, axis=1)
    ref = np.maximum(np.sqrt(gamma), 1.0)
    for it in range(method.steps):
        active = np.sqrt(gamma) > method.tol * ref
        if not active.any():
            break
        q = op(p)
        qq = np.sum(q * q, axis=1)
        alpha = np.where(active & (qq > 0), gamma / np.where(qq > 0, qq, 1.0), 0.0)
        x = x + alpha[:, None] * p
        r = r - alpha[:, None] * q
        s = op.adjoint(r)
        gamma_new = np.sum(s * s, axis=1)
        beta = np.where(active & (gamma > 0), gamma_new / np.where(gamma > 0, gamma, 1.0), 0.0)
        p = s + beta[:, None] * p
        gamma = gamma_new
        if not np.all(np.isfinite(x)):
            raise OptimizationError(f"conjugate gradient diverged at iteration {it}")
    return x


def data_consistency_solve(op: LinearOperator, y, x_init, method) -> np.ndarray:
    """Reduce ``||y - A x||`` starting from ``x_init`` with a few iterations."""
    x0 = np.asarray(x_init, dtype=float)
    xb = np.atleast_2d(x0).copy()
    yb = np.broadcast_to(np.atleast_2d(np.asarray(y, dtype=float)), (len(xb), op.output_dim))
    if not isinstance(method, (GradientDescent, ConjugateGradient)):
        raise TypeError(f"unknown data-consistency method {method!r}")
    # overflow surfaces as OptimizationError, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        if isinstance(method, GradientDescent):
            out = _descent(op, yb, xb, method)
        else:
            out = _cgls(op, yb, xb, method)
    return out[0] if x0.ndim == 1 else out
