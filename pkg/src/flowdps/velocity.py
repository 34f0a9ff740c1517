"""Velocity fields consumed by the samplers.

Three implementations share one calling convention, ``field(t, x, condition)``:

* :class:`AnalyticVelocity` - exact marginal velocity of a Gaussian mixture.
* :class:`ClassConditionalVelocity` - same, optionally restricted to one
  mixture component (the "class" used for classifier-free guidance).
* :class:`MlpVelocity` - a small numpy MLP trained by conditional flow
  matching on ``x_t = (1 - t) x0 + t x1`` with target ``x1 - x0``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import gmm
from .gmm import GaussianMixture
from .schedule import AffineSchedule

__all__ = [
    "VelocityField",
    "AnalyticVelocity",
    "ClassConditionalVelocity",
    "MlpVelocity",
    "TrainConfig",
    "TrainingError",
    "UsageError",
    "eval_velocity",
    "guided_velocity",
    "cfm_loss",
    "train_flow",
    "save_mlp",
    "load_mlp",
    "T_MIN",
]

T_MIN = 1e-5


class UsageError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class VelocityField:
    """``(t, x, condition) -> velocity`` with ``x`` of shape ``(d,)`` or ``(n, d)``."""

    dim: int
    supports_condition = False

    def __call__(self, t, x, condition=None) -> np.ndarray:
        raise NotImplementedError

    def eval_batch(self, t, x, condition=None) -> np.ndarray:
        """Evaluate with one time per row; the default loops over rows."""
        t = np.broadcast_to(np.asarray(t, dtype=float), (len(x),))
        return np.stack([self(ti, xi, condition) for ti, xi in zip(t, x)])


def eval_velocity(field: VelocityField, t: float, x, condition=None) -> np.ndarray:
    if condition is not None and not field.supports_condition:
        raise UsageError(f"{type(field).__name__} does not accept a condition")
    return field(t, x, condition)


def guided_velocity(v_uncond, v_cond, lam: float) -> np.ndarray:
    """Classifier-free guidance ``v_u + lam (v_c - v_u)``."""
    v_uncond = np.asarray(v_uncond, dtype=float)
    return v_uncond + lam * (np.asarray(v_cond, dtype=float) - v_uncond)


class AnalyticVelocity(VelocityField):
    def __init__(self, prior: GaussianMixture, sched: AffineSchedule):
        self.prior, self.sched = prior, sched
        self.dim = prior.dim

    def __call__(self, t, x, condition=None):
        if condition is not None:
            raise UsageError("AnalyticVelocity does not accept a condition")
        return gmm.marginal_velocity(self.prior, self.sched, t, x)


class ClassConditionalVelocity(VelocityField):
    """Mixture velocity; ``condition=k`` collapses the mixture onto component k."""

    supports_condition = True

    def __init__(self, prior: GaussianMixture, sched: AffineSchedule):
        self.prior, self.sched = prior, sched
        self.dim = prior.dim
        self._components = [prior.component(k) for k in range(prior.n_components)]

    def __call__(self, t, x, condition=None):
        if condition is None:
            return gmm.marginal_velocity(self.prior, self.sched, t, x)
        k = int(condition)
        if not 0 <= k < len(self._components):
            raise UsageError(f"condition {k} outside 0..{len(self._components) - 1}")
        return gmm.marginal_velocity(self._components[k], self.sched, t, x)


def _silu(z):
    return z * expit(z)


def _silu_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


class MlpVelocity(VelocityField):
    """Fully connected SiLU network on ``[x, sin/cos(w t), one-hot label]``.

    Parameters live in one flat float64 vector ``params``; ``layers`` holds
    ``(W, b)`` views into it with ``W`` of shape ``(fan_in, fan_out)``.
    Labels ``0..n_classes-1`` are real classes and ``n_classes`` is the
    null (unconditional) token.
    """

    def __init__(self, dim, hidden=(128, 128, 128), n_freq=8, n_classes=0, seed=0):
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_freq = int(n_freq)
        self.n_classes = int(n_classes)
        self.supports_condition = self.n_classes > 0
        self.freqs = np.pi * np.arange(1, self.n_freq + 1)
        in_dim = self.dim + 2 * self.n_freq + (self.n_classes + 1 if self.n_classes else 0)
        self.sizes = (in_dim, *self.hidden, self.dim)
        n_params = sum(i * o + o for i, o in zip(self.sizes, self.sizes[1:]))
        self.params = np.zeros(n_params)
        self._bind()
        rng = np.random.default_rng(seed)
        for k, (w, _) in enumerate(self.layers):
            gain = 1.0 if k < len(self.layers) - 1 else 0.1
            w[...] = gain * rng.standard_normal(w.shape) / np.sqrt(w.shape[0])

    def _bind(self):
        self.layers = []
        pos = 0
        for i, o in zip(self.sizes, self.sizes[1:]):
            w = self.params[pos : pos + i * o].reshape(i, o)
            pos += i * o
            b = self.params[pos : pos + o]
            pos += o
            self.layers.append((w, b))

    @property
    def n_params(self) -> int:
        return self.params.size

    def copy(self) -> "MlpVelocity":
        new = object.__new__(MlpVelocity)
        new.__dict__.update(self.__dict__)
        new.params = self.params.copy()
        new._bind()
        return new

    def _features(self, t, x, condition):
        x = np.atleast_2d(x)
        t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (len(x),))
        wt = t[:, None] * self.freqs[None, :]
        parts = [x, np.sin(wt), np.cos(wt)]
        if self.n_classes:
            labels = np.full(len(x), self.n_classes) if condition is None else np.broadcast_to(
                np.asarray(condition, dtype=int).reshape(-1), (len(x),)
            )
            if np.any((labels < 0) | (labels > self.n_classes)):
                raise UsageError(f"labels must lie in 0..{self.n_classes}")
            parts.append(np.eye(self.n_classes + 1)[labels])
        elif condition is not None:
            raise UsageError("unconditional MlpVelocity does not accept a condition")
        return np.concatenate(parts, axis=1)

    def _forward(self, h):
        cache = []
        for k, (w, b) in enumerate(self.layers):
            z = h @ w + b
            cache.append((h, z))
            h = _silu(z) if k < len(self.layers) - 1 else z
        return h, cache

    def __call__(self, t, x, condition=None):
        x = np.asarray(x, dtype=float)
        out, _ = self._forward(self._features(t, x, condition))
        return out[0] if x.ndim == 1 else out

    def eval_batch(self, t, x, condition=None):
        return self(np.asarray(t, dtype=float), np.atleast_2d(x), condition)

    def loss_and_grad(self, t, x_t, target, labels=None):
        """Mean over rows of ``||v(t, x_t) - target||^2`` and its parameter gradient."""
        out, cache = self._forward(self._features(t, x_t, labels))
        diff = out - target
        n = len(diff)
        loss = float(np.sum(diff * diff) / n)
        grad = np.empty_like(self.params)
        delta = 2.0 * diff / n
        pos = self.params.size
        for k in range(len(self.layers) - 1, -1, -1):
            h, z = cache[k]
            if k < len(self.layers) - 1:
                delta = delta * _silu_grad(z)
            w, b = self.layers[k]
            gw = h.T @ delta
            gb = delta.sum(axis=0)
            pos -= gb.size
            grad[pos : pos + gb.size] = gb
            pos -= gw.size
            grad[pos : pos + gw.size] = gw.ravel()
            delta = delta @ w.T
        return loss, grad


def _batch_arrays(batch):
    if isinstance(batch, tuple) and len(batch) == 3 and np.ndim(batch[0]) == 2:
        x0, x1, t = (np.asarray(b, dtype=float) for b in batch)
    else:
        if len(batch) == 0:
            raise UsageError("cfm_loss needs a non-empty batch")
        x0 = np.array([np.atleast_1d(b[0]) for b in batch], dtype=float)
        x1 = np.array([np.atleast_1d(b[1]) for b in batch], dtype=float)
        t = np.array([float(b[2]) for b in batch])
    if len(x0) == 0:
        raise UsageError("cfm_loss needs a non-empty batch")
    return x0, x1, t


def cfm_loss(field: VelocityField, batch) -> float:
    """Linear-path conditional flow-matching loss.

    ``batch`` is a sequence of ``(x0, x1, t)`` triples or a tuple of arrays
    ``(x0[n, d], x1[n, d], t[n])``.
    """
    x0, x1, t = _batch_arrays(batch)
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    diff = field.eval_batch(t, xt) - (x1 - x0)
    return float(np.sum(diff * diff) / len(diff))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 256
    learning_rate: float = 1e-3
    seed: int = 0
    label_dropout: float = 0.1
    lr_schedule: str = "cosine"  # or "constant"


OPTIMIZER = "adam(beta1=0.9, beta2=0.999, eps=1e-8)"


def train_flow(field: MlpVelocity, prior: GaussianMixture, config: TrainConfig):
    """Fit ``field`` in place by Adam on the CFM loss; returns ``(field, losses)``."""
    if field.dim != prior.dim:
        raise UsageError(f"field dimension {field.dim} != prior dimension {prior.dim}")
    if config.lr_schedule not in ("constant", "cosine"):
        raise UsageError(f"unknown learning-rate schedule {config.lr_schedule!r}")
    rng = np.random.default_rng(config.seed)
    m = np.zeros_like(field.params)
    v = np.zeros_like(field.params)
    b1, b2, eps = 0.9, 0.999, 1e-8
    losses = []
    for step in range(config.steps):
        x0, labels = gmm.sample(prior, rng, config.batch_size, return_labels=True)
        x1 = rng.standard_normal(x0.shape)
        t = rng.uniform(0.0, 1.0, config.batch_size)
        xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
        if field.n_classes:
            drop = rng.uniform(size=config.batch_size) < config.label_dropout
            labels = np.where(drop, field.n_classes, labels)
        else:
            labels = None
        loss, grad = field.loss_and_grad(t, xt, x1 - x0, labels)
        if not np.isfinite(loss) or loss > 1e6:
            raise TrainingError(f"training diverged at step {step} (loss={loss})")
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mhat = m / (1 - b1 ** (step + 1))
        vhat = v / (1 - b2 ** (step + 1))
        lr = config.learning_rate
        if config.lr_schedule == "cosine":
            lr *= 0.5 * (1.0 + math.cos(math.pi * step / config.steps))
        field.params -= lr * mhat / (np.sqrt(vhat) + eps)
        losses.append(loss)
    return field, np.asarray(losses)


_MAGIC = b"FDPS"
_VERSION = 1


def save_mlp(field: MlpVelocity, path) -> None:
    """Flat little-endian file: 16-byte header, layer sizes, then weights.

    Header is ``magic(4s) version(u4) d(u4) n_layers(u4)``; it is followed by
    ``n_layers + 1`` u4 layer sizes, ``n_freq(u4) n_classes(u4)`` and the
    float64 parameters, each layer as a row-major ``(fan_in, fan_out)``
    weight block then its bias.
    """
    n_layers = len(field.layers)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", _MAGIC, _VERSION, field.dim, n_layers))
        fh.write(struct.pack(f"<{n_layers + 1}I", *field.sizes))
        fh.write(struct.pack("<II", field.n_freq, field.n_classes))
        fh.write(field.params.astype("<f8").tobytes())


def load_mlp(path) -> MlpVelocity:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise ValueError("parameter file truncated")
    magic, version, dim, n_layers = struct.unpack_from("<4sIII", raw, 0)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    pos = 16
    sizes = struct.unpack_from(f"<{n_layers + 1}I", raw, pos)
    pos += 4 * (n_layers + 1)
    n_freq, n_classes = struct.unpack_from("<II", raw, pos)
    pos += 8
    if sizes[-1] != dim:
        raise ValueError("output layer does not match declared dimension")
    field = MlpVelocity(dim, sizes[1:-1], n_freq, n_classes)
    if field.sizes != tuple(sizes):
        raise ValueError("layer sizes inconsistent with header")
    params = np.frombuffer(raw, dtype="<f8", offset=pos)
    if params.size != field.n_params:
        raise ValueError(f"expected {field.n_params} parameters, found {params.size}")
    field.params[...] = params
    return field
