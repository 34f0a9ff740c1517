"""Plain-text file formats: 16-bit PGM images, matrices and mixture specs."""

from __future__ import annotations

import configparser
import re
from pathlib import Path

import numpy as np

from ..gmm import GaussianMixture

__all__ = [
    "PGM_MAXVAL",
    "quantize",
    "write_pgm",
    "read_pgm",
    "load_matrix",
    "parse_list",
    "load_mixture",
    "mixture_from_sections",
]

PGM_MAXVAL = 65535


def quantize(img) -> np.ndarray:
    """Map values in [0, 1] (clipped) to integer levels ``0..65535``."""
    img = np.clip(np.asarray(img, dtype=float), 0.0, 1.0)
    return np.rint(img * PGM_MAXVAL).astype(np.int64)


def write_pgm(path, img) -> None:
    """Write a 2D array with values in [0, 1] as a plain (P2) PGM."""
    levels = quantize(img)
    if levels.ndim != 2:
        raise ValueError("PGM images must be 2D")
    h, w = levels.shape
    lines = ["P2", f"{w} {h}", str(PGM_MAXVAL)]
    lines += [" ".join(str(int(v)) for v in row) for row in levels]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    """Read a plain PGM and return values scaled to [0, 1]."""
    text = Path(path).read_text()
    tokens = re.sub(r"#[^\n]*", " ", text).split()
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain PGM (P2) file")
    w, h, maxval = (int(v) for v in tokens[1:4])
    data = np.asarray(tokens[4:], dtype=np.int64)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {data.size}")
    if data.min(initial=0) < 0 or data.max(initial=0) > maxval:
        raise ValueError(f"{path}: pixel outside [0, {maxval}]")
    return data.reshape(h, w) / maxval


def load_matrix(path) -> np.ndarray:
    """Whitespace-separated rows, one matrix row per line."""
    return np.atleast_2d(np.loadtxt(path, dtype=float, ndmin=2))


def parse_list(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def mixture_from_sections(cp: configparser.ConfigParser, base_dir=".") -> GaussianMixture:
    """Build a mixture from ``[component.N]`` sections.

    Each section holds ``weight``, ``mean`` and either ``variance`` (the
    diagonal) or ``covariance_file`` (a dense matrix file, relative paths
    taken from ``base_dir``).
    """
    names = sorted(
        (s for s in cp.sections() if s.startswith("component.")),
        key=lambda s: int(s.split(".", 1)[1]),
    )
    if not names:
        raise ValueError("mixture spec has no [component.N] sections")
    weights, means, covs = [], [], []
    for name in names:
        sec = cp[name]
        weights.append(float(sec["weight"]))
        mean = np.asarray(parse_list(sec["mean"]))
        means.append(mean)
        if "covariance_file" in sec:
            covs.append(load_matrix(Path(base_dir) / sec["covariance_file"].strip('"')))
        elif "variance" in sec:
            var = np.asarray(parse_list(sec["variance"]))
            if var.size == 1:
                var = np.full(mean.size, var[0])
            covs.append(np.diag(var))
        else:
            raise ValueError(f"[{name}] needs 'variance' or 'covariance_file'")
    return GaussianMixture(np.asarray(weights), np.asarray(means), np.asarray(covs))


def load_mixture(path) -> GaussianMixture:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";",))
    if not cp.read(path):
        raise FileNotFoundError(path)
    return mixture_from_sections(cp, Path(path).parent)
