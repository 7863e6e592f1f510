"""Kernel backend selection.

Set ``LANGNEURON_DISABLE_NUMBA=1`` before import to run every hot kernel on
its pure-numpy path. Numba is also skipped when it fails to import.
"""

import os

# Prefer OpenMP: numba warns on first parallel call when the installed TBB is too old.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

_FLAG = os.environ.get("LANGNEURON_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or an identity decorator without numba."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


if HAVE_NUMBA:
    prange = numba.prange
else:  # pragma: no cover
    prange = range


def set_threads(n: int) -> None:
    """Cap the numba worker pool. A no-op on the numpy path."""
    if HAVE_NUMBA and n and n > 0:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
