"""Numerical image kernels.

The compiled extension ``_kernels`` is used when it was built; otherwise,
or when ``FLOWDPS_PURE_PYTHON=1`` is set, the numpy fallback is loaded.
``BACKEND`` names the active implementation.
"""

import os

from . import _kernels_py

if os.environ.get("FLOWDPS_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

correlate2d = _impl.correlate2d
avgpool2d = _impl.avgpool2d
avgpool2d_adjoint = _impl.avgpool2d_adjoint

__all__ = ["BACKEND", "correlate2d", "avgpool2d", "avgpool2d_adjoint"]
