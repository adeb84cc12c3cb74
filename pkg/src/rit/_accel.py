"""Selects the compiled kernels when importable, else the pure-Python twins.

Set ``RIT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from rit import _fallback

HAVE_EXTENSION = False
if os.environ.get("RIT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from rit import _kernels as _impl

        HAVE_EXTENSION = True
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

top_collections = _impl.top_collections
variance_rows = _impl.variance_rows
BACKEND = "cython" if HAVE_EXTENSION else "python"
