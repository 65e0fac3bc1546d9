"""Hot reduction kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; set
``INCLUSIVEFL_PURE_PYTHON=1`` to force the fallback. Both backends share the
same summation order and return identical bits.
"""
import os

from . import _fallback as fallback

try:
    from . import _core as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and os.environ.get("INCLUSIVEFL_PURE_PYTHON", "") not in ("1", "true"):
    BACKEND = "cython"
    matmul = compiled.matmul
    colsum = compiled.colsum
else:
    BACKEND = "python"
    matmul = fallback.matmul
    colsum = fallback.colsum

__all__ = ["BACKEND", "compiled", "fallback", "matmul", "colsum"]
