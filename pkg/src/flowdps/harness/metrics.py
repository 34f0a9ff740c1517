"""Fidelity and distributional metrics, and the per-run CSV report."""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, field, fields

import numpy as np

__all__ = [
    "PSNR_EXACT",
    "CSV_HEADER",
    "psnr",
    "image_psnr",
    "sliced_wasserstein",
    "relative_residual",
    "oracle_errors",
    "MetricRow",
    "MetricReport",
]

PSNR_EXACT = 99.0

CSV_HEADER = (
    "run_id", "solver", "task", "psnr_db", "mse", "residual_rel",
    "oracle_mean_err", "oracle_cov_err", "sliced_w", "wall_ms",
)


def psnr(x, ref, peak: float = 1.0) -> float:
    """``10 log10(peak^2 d / ||x - ref||^2)``; 99.0 when ``x == ref``."""
    x = np.asarray(x, dtype=float).ravel()
    ref = np.asarray(ref, dtype=float).ravel()
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    err = float(np.sum((x - ref) ** 2))
    if err == 0.0:
        return PSNR_EXACT
    return 10.0 * math.log10(peak * peak * x.size / err)


def image_psnr(x, ref) -> float:
    """PSNR after mapping both images by the affine map taking ``ref`` onto [0, 1]."""
    ref = np.asarray(ref, dtype=float)
    lo, hi = float(ref.min()), float(ref.max())
    scale = hi - lo if hi > lo else 1.0
    return psnr((np.asarray(x, dtype=float) - lo) / scale, (ref - lo) / scale, 1.0)


def sliced_wasserstein(a, b, projections: int = 64, rng=None) -> float:
    """Mean 1D 2-Wasserstein distance over random unit directions."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"sample sets differ in shape: {a.shape} vs {b.shape}")
    if projections < 1:
        raise ValueError("need at least one projection")
    dirs = np.random.default_rng(rng).standard_normal((projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    return float(np.mean(np.sqrt(np.mean((pa - pb) ** 2, axis=0))))


def relative_residual(op, y, x) -> float:
    y = np.asarray(y, dtype=float)
    return float(np.linalg.norm(y - op(x)) / np.linalg.norm(y))


def oracle_errors(samples, mean, cov) -> tuple[float, float]:
    """``(||m_hat - m|| / sqrt(tr C), ||C_hat - C||_F / ||C||_F)``.

    The mean error is scaled by the target spread so its Monte-Carlo size is
    about ``1/sqrt(n)``; the covariance error is nan for fewer than two samples.
    """
    samples = np.atleast_2d(samples)
    mean_err = float(np.linalg.norm(samples.mean(axis=0) - mean) / math.sqrt(np.trace(cov)))
    if len(samples) < 2:
        return mean_err, math.nan
    c_hat = np.cov(samples, rowvar=False).reshape(cov.shape)
    return mean_err, float(np.linalg.norm(c_hat - cov) / np.linalg.norm(cov))


@dataclass
class MetricRow:
    run_id: str
    solver: str
    task: str
    psnr_db: float = math.nan
    mse: float = math.nan
    residual_rel: float = math.nan
    oracle_mean_err: float = math.nan
    oracle_cov_err: float = math.nan
    sliced_w: float = math.nan
    wall_ms: float = math.nan


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    def write_csv(self, path) -> None:
        """Undefined metrics are written as ``nan``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([_fmt(v) for v in astuple(r)])

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = tuple(next(rd))
            if header != CSV_HEADER:
                raise ValueError(f"{path}: unexpected header {header}")
            kinds = [f.type for f in fields(MetricRow)]
            rows = [
                MetricRow(*[v if k == "str" else float(v) for k, v in zip(kinds, rec)])
                for rec in rd
            ]
        return cls(rows)
