import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowdps import _core
from flowdps._core import _kernels_py as py

try:
    from flowdps._core import _kernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="compiled extension not built")


@needs_ext
@given(n=st.integers(1, 3), h=st.integers(1, 12), w=st.integers(1, 12),
       kh=st.sampled_from([1, 3, 5, 7]), kw=st.sampled_from([1, 3, 5]), seed=st.integers(0, 2**31))
def test_correlate_agrees(n, h, w, kh, kw, seed):
    r = np.random.default_rng(seed)
    x, k = r.standard_normal((n, h, w)), r.standard_normal((kh, kw))
    assert np.max(np.abs(cy.correlate2d(x, k) - py.correlate2d(x, k))) < 1e-12


@needs_ext
@given(n=st.integers(1, 3), hb=st.integers(1, 6), wb=st.integers(1, 6), f=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_avgpool_agrees(n, hb, wb, f, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, hb * f, wb * f))
    assert np.max(np.abs(cy.avgpool2d(x, f) - py.avgpool2d(x, f))) < 1e-12
    y = r.standard_normal((n, hb, wb))
    assert np.max(np.abs(cy.avgpool2d_adjoint(y, f) - py.avgpool2d_adjoint(y, f))) < 1e-12


def test_python_correlate_reference():
    x = np.arange(9.0).reshape(1, 3, 3)
    k = np.zeros((3, 3))
    k[1, 2] = 1.0  # picks the right-hand neighbour
    out = py.correlate2d(x, k)[0]
    assert np.array_equal(out, [[1, 2, 0], [4, 5, 0], [7, 8, 0]])


def _backend(env):
    code = "import flowdps; print(flowdps.BACKEND)"
    return subprocess.run([sys.executable, "-c", code], env={**os.environ, **env},
                          capture_output=True, text=True, check=True).stdout.strip()


def test_env_forces_pure_python():
    assert _backend({"FLOWDPS_PURE_PYTHON": "1"}) == "python"


@needs_ext
def test_extension_selected_by_default():
    assert _backend({"FLOWDPS_PURE_PYTHON": ""}) == "cython"
    assert _core.BACKEND in ("cython", "python")
