"""Pure-numpy versions of the compiled image kernels."""

import numpy as np


def correlate2d(x, k):
    """Zero-padded 'same' correlation of each image in a (n, H, W) stack."""
    x = np.ascontiguousarray(x, dtype=float)
    k = np.asarray(k, dtype=float)
    n, h, w = x.shape
    kh, kw = k.shape
    ch, cw = kh // 2, kw // 2
    padded = np.zeros((n, h + kh - 1, w + kw - 1))
    padded[:, ch : ch + h, cw : cw + w] = x
    out = np.zeros_like(x)
    for u in range(kh):
        for v in range(kw):
            if k[u, v] != 0.0:
                out += k[u, v] * padded[:, u : u + h, v : v + w]
    return out


def avgpool2d(x, f):
    n, h, w = x.shape
    return x.reshape(n, h // f, f, w // f, f).mean(axis=(2, 4))


def avgpool2d_adjoint(y, f):
    y = np.asarray(y, dtype=float)
    return np.repeat(np.repeat(y, f, axis=1), f, axis=2) / (f * f)
