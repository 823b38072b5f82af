"""Optional numba acceleration.

Hot loops in :mod:`fecembed.kernels` are written twice: an explicit-loop
version compiled with ``numba.njit`` and a vectorized numpy version. The
numba path is used when numba imports cleanly and the environment variable
``FECEMBED_NUMBA`` is not set to ``0``/``false``/``off``.
"""

import os

_FLAG = os.environ.get("FECEMBED_NUMBA", "1").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "off", "no")


def njit(func):
    """Compile ``func`` in nopython mode when numba is importable.

    Compilation happens even when the numpy path is selected, so both
    backends stay importable side by side for tests and benchmarks.
    """
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True)(func)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
