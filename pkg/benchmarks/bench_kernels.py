"""Time the compiled image kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each row is the best of N timings for one batch; ``speedup`` is
python time / cython time. Results are also checked for agreement.
"""

import argparse
import timeit

import numpy as np

from flowdps._core import _kernels_py as py
from flowdps.operators import gaussian_blur_kernel

try:
    from flowdps._core import _kernels as cy
except ImportError:
    cy = None


def cases(rng):
    for n, side in ((1, 16), (100, 16), (8, 128)):
        x = rng.standard_normal((n, side, side))
        k = gaussian_blur_kernel(5, 1.0)
        yield f"correlate2d 5x5  n={n:<3d} {side}x{side}", "correlate2d", (x, k)
        yield f"avgpool2d f=2    n={n:<3d} {side}x{side}", "avgpool2d", (x, 2)
        y = rng.standard_normal((n, side // 2, side // 2))
        yield f"avgpool2d_adj    n={n:<3d} {side}x{side}", "avgpool2d_adjoint", (y, 2)


def best(fn, args, repeat):
    number = max(1, int(0.05 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-7)))
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if cy is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<34}{'python us':>12}{'cython us':>12}{'speedup':>10}")
    for label, name, a in cases(rng):
        f_py, f_cy = getattr(py, name), getattr(cy, name)
        assert np.allclose(f_py(*a), f_cy(*a), atol=1e-12)
        t_py, t_cy = best(f_py, a, args.repeat), best(f_cy, a, args.repeat)
        print(f"{label:<34}{1e6 * t_py:>12.1f}{1e6 * t_cy:>12.1f}{t_py / t_cy:>10.2f}")


if __name__ == "__main__":
    main()
