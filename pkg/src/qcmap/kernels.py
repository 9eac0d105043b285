"""Kernel dispatch: the compiled module when importable, NumPy otherwise.

Set ``QCMAP_PURE_PYTHON=1`` before import to force the fallback.
"""
import logging
import os

from qcmap import _pykernels

logger = logging.getLogger(__name__)

_impl = _pykernels
BACKEND = "python"
if os.environ.get("QCMAP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from qcmap import _ckernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        logger.debug("compiled kernels unavailable; using NumPy fallback")

bspline_eval = _impl.bspline_eval
accumulate_outer = _impl.accumulate_outer
element_jacobians = _impl.element_jacobians
