"""Kernel selection: compiled extension when importable, numpy fallback otherwise.

Set ``VOLTMULTI_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("VOLTMULTI_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

network_eval = _impl.network_eval
newton_solve = _impl.newton_solve

CONVERGED = _kernels_py.CONVERGED
MAX_ITER = _kernels_py.MAX_ITER
SINGULAR = _kernels_py.SINGULAR
