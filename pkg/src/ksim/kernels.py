"""Backend selection for the hot kernels.

The compiled extension is used when it was built; ``KSIM_PURE_PYTHON=1``
forces the pure-Python fallback (handy for debugging and for the benchmark).
"""

import os

import numpy as np

from . import _pykernels

_force_pure = os.environ.get("KSIM_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_pure:
        raise ImportError("pure backend forced")
    from . import _kernels as _impl  # type: ignore[attr-defined]

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

pmp_match = _impl.pmp_match
pmp_match_batch = _impl.pmp_match_batch
cache_access = _impl.cache_access


def _array(n, dtype):
    if BACKEND == "cython":
        return np.zeros(n, dtype=dtype)
    return [0] * n


def u64_array(n):
    return _array(n, np.uint64)


def u8_array(n):
    return _array(n, np.uint8)


def i64_array(n):
    return _array(n, np.int64)


def backends():
    """Map of available backend name -> kernel module (used by tests and the benchmark)."""
    found = {"python": _pykernels}
    try:
        from . import _kernels  # type: ignore[attr-defined]

        found["cython"] = _kernels
    except ImportError:
        pass
    return found
